"""Desk-scale granularity-conditioned mask decoder.

A scalar granularity g in [0.1, 1.0] becomes a random-Fourier embedding
phi(g) = [sin(2 pi f_k g), cos(2 pi f_k g)] projected by a 3-layer MLP into
the decoder space. A single learnable mask token joins the point and
granularity embeddings in one two-way attention block (token self-attention,
token-to-image cross-attention, feed-forward, image-to-token
cross-attention); the output token maps through a 3-layer MLP to a weight
vector dotted against the updated image features to produce per-patch mask
logits. Training uses focal + dice loss at 20:1.

Point prompts and patch positions reuse the Fourier mechanism on
normalized coordinates; the image positional basis shares the point
basis's leading frequency pairs so the attention projections can align
click and patch positions.

Checkpoint format (little-endian): magic "UGTD" | version u32=1 |
d_model u32 | d_fourier u32 | feature_dim u32 | float32 blob of all
tensors in `GranularityDecoder.tensor_names()` order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import masks as mk
from .evaluation import Click, initial_click
from .features import PatchFeatureMap, RegionSpec, SynthSpec, synth_features
from .hierarchy import granularity_scores

__all__ = [
    "FourierBasis",
    "TrainConfig",
    "GranularityDecoder",
    "TrainSample",
    "fourier_encode",
    "embed_granularity",
    "decode",
    "loss_and_grad",
    "train_toy",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "build_training_corpus",
    "DecoderSegmenter",
]

CHECKPOINT_MAGIC = b"UGTD"
CHECKPOINT_VERSION = 1


@dataclass
class FourierBasis:
    """Fixed random frequencies for scalar (or coordinate-pair) encodings."""

    frequencies: np.ndarray

    @classmethod
    def gaussian(cls, d_out: int, sigma: float, seed: int = 0, in_dim: int = 1) -> "FourierBasis":
        if d_out % 2:
            raise ValueError(f"encoding dimension must be even, got {d_out}")
        rng = np.random.default_rng(seed)
        shape = (d_out // 2,) if in_dim == 1 else (d_out // 2, in_dim)
        return cls(frequencies=rng.normal(scale=sigma, size=shape))


def fourier_encode(g: float | np.ndarray, basis: FourierBasis) -> np.ndarray:
    """phi(x) = [sin(2 pi f_k . x), cos(2 pi f_k . x)]; squared norm is always d/2."""
    f = basis.frequencies
    if f.ndim == 1:
        angles = 2.0 * math.pi * f * float(g)
    else:
        angles = 2.0 * math.pi * (f @ np.asarray(g, dtype=float))
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class TrainConfig:
    epochs: int = 60
    batch: int = 32
    lr: float = 2e-3
    seed: int = 0
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    d_model: int = 64
    d_fourier: int = 128
    grid: int = 32
    feature_dim: int = 16
    sigma_g: float = 10.0
    sigma_p: float = 2.0
    points_per_mask: int = 3
    # extra (random point, random g) queries per image; they supervise the
    # whole granularity axis, not just each image's few exact level values
    g_jitter_samples: int = 8
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        for name in ("epochs", "batch", "d_model", "d_fourier", "grid", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.focal_weight < 0 or self.dice_weight < 0:
            raise ValueError("lr must be positive and loss weights non-negative")


class _Attention(nn.Module):
    """Single-head attention with separate query/key input dims."""

    def __init__(self, dq: int, dk: int, d_attn: int, d_out: int) -> None:
        super().__init__()
        self.wq = nn.Linear(dq, d_attn)
        self.wk = nn.Linear(dk, d_attn)
        self.wv = nn.Linear(dk, d_attn)
        self.wo = nn.Linear(d_attn, d_out)
        self.scale = 1.0 / math.sqrt(d_attn)

    def forward(self, q_in: torch.Tensor, k_in: torch.Tensor, v_in: torch.Tensor) -> torch.Tensor:
        q, k, v = self.wq(q_in), self.wk(k_in), self.wv(v_in)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        return self.wo(attn @ v)


class _MLP3(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int) -> None:
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(d_in, d_hidden),
            nn.GELU(),
            nn.Linear(d_hidden, d_hidden),
            nn.GELU(),
            nn.Linear(d_hidden, d_out),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class GranularityDecoder(nn.Module):
    """Mask decoder conditioned on one point prompt and a granularity scalar."""

    def __init__(
        self,
        d_model: int = 64,
        d_fourier: int = 128,
        feature_dim: int = 16,
        sigma_g: float = 10.0,
        sigma_p: float = 2.0,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if d_model % 2 or feature_dim % 2:
            raise ValueError("d_model and feature_dim must be even")
        self.d_model = d_model
        self.d_fourier = d_fourier
        self.feature_dim = feature_dim
        self.sigma_g = sigma_g
        self.sigma_p = sigma_p

        g_basis = FourierBasis.gaussian(d_fourier, sigma_g, seed=seed)
        p_basis = FourierBasis.gaussian(d_model, sigma_p, seed=seed + 1, in_dim=2)
        self.register_buffer("g_freqs", torch.tensor(g_basis.frequencies, dtype=torch.float32))
        self.register_buffer("p_freqs", torch.tensor(p_basis.frequencies, dtype=torch.float32))
        # image positional basis shares the point basis's leading pairs
        self.register_buffer("i_freqs", torch.tensor(p_basis.frequencies[: feature_dim // 2], dtype=torch.float32))

        torch.manual_seed(seed)
        self.mask_token = nn.Parameter(torch.randn(d_model) * 0.02)
        self.g_mlp = _MLP3(d_fourier, d_model, d_model)
        self.self_attn = _Attention(d_model, d_model, d_model, d_model)
        self.t2i_attn = _Attention(d_model, feature_dim, d_model, d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))
        self.i2t_attn = _Attention(feature_dim, d_model, d_model, feature_dim)
        self.ln_self = nn.LayerNorm(d_model)
        self.ln_t2i = nn.LayerNorm(d_model)
        self.ln_ffn = nn.LayerNorm(d_model)
        self.ln_img = nn.LayerNorm(feature_dim)
        self.out_mlp = _MLP3(d_model, d_model, feature_dim)

    def tensor_names(self) -> list[str]:
        """Canonical checkpoint field order: buffers, then parameters."""
        return [name for name, _ in self.named_buffers()] + [name for name, _ in self.named_parameters()]

    def _fourier(self, x: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
        angles = 2.0 * math.pi * (x @ freqs.T if freqs.ndim == 2 else x[..., None] * freqs)
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)

    def image_pe(self, height: int, width: int) -> torch.Tensor:
        """Positional encoding of patch centers, (H*W, feature_dim)."""
        dtype = self.i_freqs.dtype
        ys = (torch.arange(height, dtype=dtype) + 0.5) / height
        xs = (torch.arange(width, dtype=dtype) + 0.5) / width
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)
        return self._fourier(coords, self.i_freqs)

    def forward(
        self,
        features: torch.Tensor,  # (B, H*W, D)
        points: torch.Tensor,  # (B, 2) normalized (x, y)
        gs: torch.Tensor,  # (B,)
        grid_hw: tuple[int, int],
    ) -> torch.Tensor:
        b = features.shape[0]
        e_g = self.g_mlp(self._fourier(gs, self.g_freqs))
        e_p = self._fourier(points, self.p_freqs)
        tokens = torch.stack([self.mask_token.expand(b, -1), e_p, e_g], dim=1)

        pe = self.image_pe(*grid_hw).to(features.dtype)[None]
        img_k = features + pe
        t = self.ln_self(tokens + self.self_attn(tokens, tokens, tokens))
        t = self.ln_t2i(t + self.t2i_attn(t, img_k, features))
        t = self.ln_ffn(t + self.ffn(t))
        x = self.ln_img(features + self.i2t_attn(img_k, t, t))

        w = self.out_mlp(t[:, 0])
        logits = torch.einsum("bd,bnd->bn", w, x)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("decoder produced non-finite logits")
        return logits


def embed_granularity(g: float, model: GranularityDecoder) -> np.ndarray:
    """E_g = MLP(phi(g)) in the decoder feature space."""
    with torch.no_grad():
        phi = model._fourier(torch.tensor([g], dtype=model.g_freqs.dtype), model.g_freqs)
        return model.g_mlp(phi)[0].numpy()


def _normalized_point(point: tuple[int, int], height: int, width: int) -> tuple[float, float]:
    x, y = point
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"point {point} outside {width}x{height} grid")
    return ((x + 0.5) / width, (y + 0.5) / height)


def decode(
    fmap: PatchFeatureMap, point: tuple[int, int], g: float, model: GranularityDecoder
) -> np.ndarray:
    """Mask logits over the patch grid for one (point, granularity) prompt.

    `point` is (x, y) in patch units. The predicted mask is `logits > 0`.
    """
    dtype = model.g_freqs.dtype
    feats = torch.tensor(fmap.flat[None], dtype=dtype)
    pt = torch.tensor([_normalized_point(point, fmap.height, fmap.width)], dtype=dtype)
    gs = torch.tensor([g], dtype=dtype)
    with torch.no_grad():
        logits = model(feats, pt, gs, (fmap.height, fmap.width))
    return logits[0].numpy().reshape(fmap.height, fmap.width)


def _focal_dice(
    logits: torch.Tensor, target: torch.Tensor, focal_weight: float, dice_weight: float
) -> torch.Tensor:
    """20:1 focal (alpha=0.25, gamma=2) + dice (smooth=1), scalar per batch."""
    p = torch.sigmoid(logits)
    t = target.to(logits.dtype)
    logp = nn.functional.logsigmoid(logits)
    lognp = nn.functional.logsigmoid(-logits)
    focal = -(0.25 * t * (1 - p) ** 2 * logp + 0.75 * (1 - t) * p**2 * lognp)
    focal = focal.mean()
    inter = (p * t).sum()
    dice = 1.0 - (2.0 * inter + 1.0) / ((p * p).sum() + (t * t).sum() + 1.0)
    return focal_weight * focal + dice_weight * dice


def loss_and_grad(
    logits: np.ndarray,
    target: np.ndarray,
    focal_weight: float = 20.0,
    dice_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Training loss and its gradient with respect to the logits."""
    lt = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    tt = torch.tensor(np.asarray(target, dtype=np.float64))
    loss = _focal_dice(lt, tt, focal_weight, dice_weight)
    loss.backward()
    return float(loss.item()), lt.grad.numpy()


@dataclass
class TrainSample:
    features: np.ndarray  # (H*W, D) float32
    point: tuple[float, float]  # normalized (x, y)
    g: float
    target: np.ndarray  # (H*W,) bool
    image_id: int = 0


def _nested_chain(rng: np.random.Generator, grid: int, depth: int) -> list[RegionSpec]:
    """A chain of nested regions, each strictly inside its parent."""
    regions: list[RegionSpec] = []
    r0, c0 = int(rng.integers(1, grid // 4)), int(rng.integers(1, grid // 4))
    r1 = int(rng.integers(grid * 3 // 4, grid - 1))
    c1 = int(rng.integers(grid * 3 // 4, grid - 1))
    parent: int | None = None
    for level in range(depth):
        # an ellipse stays inside any enclosing rectangle, not vice versa
        leaf = level == depth - 1
        shape = "ellipse" if leaf and rng.random() < 0.3 else "rectangle"
        regions.append(RegionSpec(shape, (r0, c0, r1, c1), parent=parent))
        parent = level
        hh, ww = r1 - r0, c1 - c0
        if hh < 10 or ww < 10:
            break
        # shrink by at least 2 per side so adjacent levels stay well
        # separated in area (keeps granularity levels distinguishable)
        mr = max(3, hh // 4)
        mc = max(3, ww // 4)
        r0, r1 = r0 + int(rng.integers(2, mr + 1)), r1 - int(rng.integers(2, mr + 1))
        c0, c1 = c0 + int(rng.integers(2, mc + 1)), c1 - int(rng.integers(2, mc + 1))
    return regions


def build_training_corpus(n_images: int, cfg: TrainConfig, seed: int | None = None) -> list[TrainSample]:
    """Synthetic nested-shape corpus with per-mask granularities from the
    relative-area rule; every (point, g) target follows the stored-hierarchy
    query semantics (innermost nearest-g mask containing the point)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    samples: list[TrainSample] = []
    for img_idx in range(n_images):
        depth = int(rng.integers(2, 5))
        regions = _nested_chain(rng, cfg.grid, depth)
        spec = SynthSpec(
            height=cfg.grid,
            width=cfg.grid,
            dim=cfg.feature_dim,
            regions=regions,
            noise_sigma=0.05,
            seed=int(rng.integers(0, 2**31)),
            background="noise",
        )
        res = synth_features(spec)
        areas = [int(m.sum()) for m in res.masks]
        gs = granularity_scores(areas)
        flat_feats = res.features.flat

        def add_sample(x: int, y: int, g: float) -> None:
            # target: nearest-g mask containing the point (area tiebreak)
            cands = [
                (abs(g - gs[j]), areas[j], j)
                for j in range(len(res.masks))
                if res.masks[j][y, x]
            ]
            target = res.masks[min(cands)[2]]
            samples.append(
                TrainSample(
                    features=flat_feats,
                    point=((x + 0.5) / cfg.grid, (y + 0.5) / cfg.grid),
                    g=g,
                    target=target.ravel(),
                    image_id=img_idx,
                )
            )

        for k, mask in enumerate(res.masks):
            for x, y in _sample_points(mask, cfg.points_per_mask, rng):
                add_sample(x, y, gs[k])
        root = res.masks[int(np.argmax(areas))]
        ys, xs = np.nonzero(root)
        # half the extra queries land on the canonical 0.1-step sweep grid,
        # half anywhere on the axis; both target the nearest-g rule
        for j in range(cfg.g_jitter_samples):
            i = int(rng.integers(0, len(ys)))
            if j % 2 == 0:
                g = float(rng.integers(1, 11)) / 10.0
            else:
                g = float(rng.uniform(0.1, 1.0))
            add_sample(int(xs[i]), int(ys[i]), g)
    return samples


def _sample_points(mask: np.ndarray, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """The interior maximum plus k-1 random in-mask points, (x, y) patch units."""
    click = initial_click(mask)
    pts = [(click.x, click.y)]
    ys, xs = np.nonzero(mask)
    for _ in range(k - 1):
        i = int(rng.integers(0, len(ys)))
        pts.append((int(xs[i]), int(ys[i])))
    return pts


def _forward_batch(
    model: GranularityDecoder, batch: list[TrainSample], grid_hw: tuple[int, int], dtype: torch.dtype
) -> torch.Tensor:
    feats = torch.tensor(np.stack([s.features for s in batch]), dtype=dtype)
    pts = torch.tensor([s.point for s in batch], dtype=dtype)
    gs = torch.tensor([s.g for s in batch], dtype=dtype)
    return model(feats, pts, gs, grid_hw)


def train_toy(
    corpus: list[TrainSample],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[GranularityDecoder, list[dict]]:
    """Seeded, single-threaded training; per-epoch loss and validation 1-IoU.

    The corpus is split by image so validation shapes are never seen in
    training. Non-finite loss aborts with the last finite-loss checkpoint.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        torch.manual_seed(cfg.seed)
        model = GranularityDecoder(
            d_model=cfg.d_model,
            d_fourier=cfg.d_fourier,
            feature_dim=cfg.feature_dim,
            sigma_g=cfg.sigma_g,
            sigma_p=cfg.sigma_p,
            seed=cfg.seed,
        )
        image_ids = sorted({s.image_id for s in corpus})
        n_val = max(1, int(len(image_ids) * cfg.val_fraction)) if len(image_ids) > 1 else 0
        val_ids = set(image_ids[len(image_ids) - n_val :])
        train = [s for s in corpus if s.image_id not in val_ids]
        val = [s for s in corpus if s.image_id in val_ids]
        if not train:
            train, val = list(corpus), []

        grid_hw = (cfg.grid, cfg.grid)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        # step decay settles the late-training oscillation of Adam
        milestones = {int(cfg.epochs * 0.6), int(cfg.epochs * 0.85)}
        scheduler = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=sorted(milestones), gamma=0.3)
        rng = np.random.default_rng(cfg.seed)
        metrics: list[dict] = []
        last_good: dict | None = None
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train))
            total = 0.0
            model.train()
            for start in range(0, len(order), cfg.batch):
                batch = [train[i] for i in order[start : start + cfg.batch]]
                logits = _forward_batch(model, batch, grid_hw, torch.float32)
                target = torch.tensor(np.stack([s.target for s in batch]), dtype=torch.float32)
                loss = _focal_dice(logits, target, cfg.focal_weight, cfg.dice_weight)
                if not torch.isfinite(loss):
                    if last_good is not None:
                        model.load_state_dict(last_good)
                    raise FloatingPointError(f"training diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.item()) * len(batch)
            scheduler.step()
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            row = {
                "epoch": epoch,
                "train_loss": total / len(train),
                "val_one_iou": _validation_one_iou(model, val, grid_hw) if val else None,
            }
            metrics.append(row)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(row) + "\n")
        model.eval()
        return model, metrics
    finally:
        torch.set_num_threads(n_threads)


def _validation_one_iou(
    model: GranularityDecoder, val: list[TrainSample], grid_hw: tuple[int, int]
) -> float:
    if not val:
        return float("nan")
    model.eval()
    ious = []
    with torch.no_grad():
        for start in range(0, len(val), 64):
            batch = val[start : start + 64]
            logits = _forward_batch(model, batch, grid_hw, torch.float32).numpy()
            for s, lg in zip(batch, logits):
                pred = lg > 0.0
                inter = np.count_nonzero(pred & s.target)
                union = np.count_nonzero(pred | s.target)
                ious.append(inter / union if union else 0.0)
    return float(np.mean(ious))


def grad_check(
    model: GranularityDecoder,
    sample: TrainSample,
    grid_hw: tuple[int, int],
    eps: float = 1e-4,
    n_params: int = 200,
    seed: int = 0,
    focal_weight: float = 20.0,
    dice_weight: float = 1.0,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over a random subsample of at least n_params parameters (float64)."""
    model = model.double()
    target = torch.tensor(np.asarray(sample.target, dtype=np.float64))

    def total_loss() -> torch.Tensor:
        logits = _forward_batch(model, [sample], grid_hw, torch.float64)
        return _focal_dice(logits, target, focal_weight, dice_weight)

    model.zero_grad()
    total_loss().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    sizes = [p.numel() for p in params]
    rng = np.random.default_rng(seed)
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat_idx in sorted(int(i) for i in picks):
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = flat_idx - offsets[pi]
            p = params[pi]
            flat = p.view(-1)
            orig = float(flat[local])
            analytic = float(p.grad.view(-1)[local])
            flat[local] = orig + eps
            hi = float(total_loss())
            flat[local] = orig - eps
            lo = float(total_loss())
            flat[local] = orig
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, abs(analytic - fd) / denom)
    return worst


def save_checkpoint(model: GranularityDecoder, path: str | Path) -> None:
    header = struct.pack(
        "<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.d_model, model.d_fourier, model.feature_dim
    )
    state = model.state_dict()
    blob = b"".join(
        np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4").tobytes()
        for name in model.tensor_names()
    )
    Path(path).write_bytes(header + blob)


def load_checkpoint(path: str | Path, sigma_g: float = 10.0, sigma_p: float = 2.0) -> GranularityDecoder:
    raw = Path(path).read_bytes()
    head = struct.Struct("<4sIIII")
    magic, version, d_model, d_fourier, feature_dim = head.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    model = GranularityDecoder(
        d_model=d_model, d_fourier=d_fourier, feature_dim=feature_dim, sigma_g=sigma_g, sigma_p=sigma_p
    )
    state = model.state_dict()
    offset = head.size
    for name in model.tensor_names():
        t = state[name]
        nbytes = t.numel() * 4
        arr = np.frombuffer(raw, dtype="<f4", count=t.numel(), offset=offset).reshape(tuple(t.shape))
        state[name] = torch.tensor(arr.copy(), dtype=torch.float32)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: checkpoint has {len(raw) - offset} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model


class DecoderSegmenter:
    """Adapter exposing the decoder through the evaluation Segmenter protocol.

    Only the first positive click conditions the model (single-point
    decoder); extra clicks are ignored.
    """

    def __init__(self, model: GranularityDecoder, fmaps: dict[str, PatchFeatureMap]):
        self.model = model
        self.fmaps = dict(fmaps)

    def predict(self, image_ref: str, clicks: list[Click], g: float) -> np.ndarray:
        fmap = self.fmaps[image_ref]
        first = next((c for c in clicks if c.positive), None)
        if first is None:
            return np.zeros((fmap.height, fmap.width), dtype=bool)
        logits = decode(fmap, (first.x, first.y), g, self.model)
        return logits > 0.0
