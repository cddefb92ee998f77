"""Patch-feature map I/O and synthesis.

Feature file format (little-endian):

    magic "UGF1" (4 ASCII bytes)
    version   u32 = 1
    H         u32   (patch rows)
    W         u32   (patch cols)
    D         u32   (channels)
    flags     u32   (bit 0: vectors are L2-normalized)
    payload   H*W*D float32, patch-major row order, channels contiguous

The synthetic generator assigns each declared region a unit feature
direction (rejection-sampled for pairwise angular separation) and emits
patch features as region direction plus Gaussian noise, renormalized.
It is the desk-scale substitute for a real backbone feature dump; see
docs/feature_dump.md for extracting features from an actual ViT.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PatchFeatureMap",
    "RegionSpec",
    "SynthSpec",
    "SynthResult",
    "read_features",
    "write_features",
    "synth_features",
    "cosine",
    "l2_normalize",
]

MAGIC = b"UGF1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

NORM_TOL = 1e-5
# minimum pairwise angular separation between synthetic region directions
MIN_SEPARATION_DEG = 30.0


class FeatureFormatError(ValueError):
    """Raised for malformed feature files."""


@dataclass
class PatchFeatureMap:
    """H x W grid of D-dimensional patch feature vectors."""

    data: np.ndarray  # (H, W, D) float32
    normalized: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.data, np.ndarray) or self.data.ndim != 3:
            raise TypeError("feature data must be an (H, W, D) ndarray")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape[0] < 1 or self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError(f"feature map dimensions must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.data, axis=-1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise ValueError("normalized flag set but patch norms deviate from 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def flat(self) -> np.ndarray:
        """(H*W, D) row-major view of the patch vectors."""
        return self.data.reshape(-1, self.dim)


@dataclass(frozen=True)
class RegionSpec:
    """One synthetic region: axis-aligned rectangle or inscribed ellipse.

    `bounds` is (r0, c0, r1, c1), half-open, in patch units. `parent` is the
    index of the enclosing region, or None for a top-level region.
    """

    shape: str
    bounds: tuple[int, int, int, int]
    parent: int | None = None

    def __post_init__(self) -> None:
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError(f"unknown region shape {self.shape!r}")


@dataclass
class SynthSpec:
    """Recipe for a synthetic feature map.

    background: "coherent" gives all background patches one shared
    direction; "noise" gives each background patch its own random unit
    vector so the background never forms a coherent segment.
    child_cos: when set to (lo, hi), a nested region's direction is a
    controlled rotation of its parent's with cosine in that band, so the
    divide stage merges parent and child while the conquer schedule can
    still split them.
    """

    height: int
    width: int
    dim: int
    regions: list[RegionSpec] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0
    background: str = "coherent"
    child_cos: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.background not in ("coherent", "noise"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if self.child_cos is not None:
            lo, hi = self.child_cos
            if not -1.0 < lo <= hi < 1.0:
                raise ValueError(f"child_cos band must satisfy -1 < lo <= hi < 1, got {self.child_cos}")


@dataclass
class SynthResult:
    features: PatchFeatureMap
    masks: list[np.ndarray]  # one patch-resolution mask per region
    parents: list[int | None]  # nesting tree, parallel to masks


def l2_normalize(data: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """L2-normalize vectors along the last axis."""
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    return data / np.maximum(norms, eps)


def write_features(fmap: PatchFeatureMap, path: str | Path) -> None:
    """Write a feature map in the UGF1 binary format."""
    path = Path(path)
    flags = 1 if fmap.normalized else 0
    header = _HEADER.pack(MAGIC, VERSION, fmap.height, fmap.width, fmap.dim, flags)
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def read_features(path: str | Path, normalize: bool = False) -> PatchFeatureMap:
    """Read a UGF1 feature file, optionally L2-normalizing on load."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, w, d, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + h * w * d * 4
    if len(raw) != expected:
        raise FeatureFormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, d)
    data = data.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FeatureFormatError(f"{path}: payload contains non-finite values")
    normalized = bool(flags & 1)
    if normalize and not normalized:
        data = l2_normalize(data)
        normalized = True
    return PatchFeatureMap(data=data, normalized=normalized)


def _region_mask(region: RegionSpec, height: int, width: int) -> np.ndarray:
    r0, c0, r1, c1 = region.bounds
    if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
        raise ValueError(f"region bounds {region.bounds} outside {height}x{width} grid")
    mask = np.zeros((height, width), dtype=bool)
    if region.shape == "rectangle":
        mask[r0:r1, c0:c1] = True
    else:
        rr, cc = np.mgrid[0:height, 0:width]
        cy, cx = (r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0
        ry, rx = max((r1 - r0) / 2.0, 0.5), max((c1 - c0) / 2.0, 0.5)
        mask = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
    return mask


def _separated_directions(
    n: int,
    dim: int,
    rng: np.random.Generator,
    parents: list[int | None] | None = None,
    child_cos: tuple[float, float] | None = None,
) -> np.ndarray:
    """Draw n unit directions with pairwise angle >= MIN_SEPARATION_DEG.

    When `child_cos` is given, a direction with a parent is a rotation of
    the parent's direction with cosine drawn uniformly in the band (still
    respecting the separation floor against all other directions).
    """
    max_cos = math.cos(math.radians(MIN_SEPARATION_DEG))
    parents = parents or [None] * n
    dirs: list[np.ndarray] = []
    for i in range(n):
        parent = parents[i] if i < len(parents) else None
        for _attempt in range(10_000):
            if parent is not None and child_cos is not None:
                base = dirs[parent]
                perp = rng.normal(size=dim)
                perp -= (perp @ base) * base
                perp /= np.linalg.norm(perp)
                c = rng.uniform(*child_cos)
                v = c * base + math.sqrt(max(1.0 - c * c, 0.0)) * perp
            else:
                v = rng.normal(size=dim)
                v /= np.linalg.norm(v)
            others = [u for j, u in enumerate(dirs) if not (parent is not None and j == parent)]
            if all(abs(float(v @ u)) <= max_cos for u in others):
                dirs.append(v)
                break
        else:
            raise ValueError(
                f"could not place {n} directions with {MIN_SEPARATION_DEG} deg separation in dim {dim}"
            )
    return np.stack(dirs)


def synth_features(spec: SynthSpec) -> SynthResult:
    """Generate a deterministic synthetic feature map with nested region structure.

    Each region (and the background) gets its own unit direction; a patch's
    feature is the direction of the innermost region containing it plus
    Gaussian noise, renormalized. Regions must be nested or disjoint.
    """
    rng = np.random.default_rng(spec.seed)
    masks = [_region_mask(r, spec.height, spec.width) for r in spec.regions]
    parents = [r.parent for r in spec.regions]

    for i, region in enumerate(spec.regions):
        if region.parent is not None:
            if not (0 <= region.parent < len(spec.regions)) or region.parent == i:
                raise ValueError(f"region {i} has invalid parent {region.parent}")
            if np.any(masks[i] & ~masks[region.parent]):
                raise ValueError(f"region {i} is not contained in its parent {region.parent}")
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if _related(parents, i, j):
                continue
            if np.any(masks[i] & masks[j]):
                raise ValueError(f"regions {i} and {j} overlap but are not nested")

    # +1 direction for the background (unused in "noise" mode)
    dirs = _separated_directions(
        len(masks) + 1, spec.dim, rng, parents=parents + [None], child_cos=spec.child_cos
    )
    owner = np.full((spec.height, spec.width), len(masks), dtype=np.int64)
    for i in _topological_order(parents):
        owner[masks[i]] = i  # children later in the order overwrite parents
    data = dirs[owner.ravel()].reshape(spec.height, spec.width, spec.dim)
    if spec.background == "noise":
        bg = owner == len(masks)
        data = data.copy()
        data[bg] = rng.normal(size=(int(bg.sum()), spec.dim))
    if spec.noise_sigma > 0:
        data = data + rng.normal(scale=spec.noise_sigma, size=data.shape)
    data = l2_normalize(data).astype(np.float32)
    fmap = PatchFeatureMap(data=data, normalized=True)
    return SynthResult(features=fmap, masks=masks, parents=parents)


def _related(parents: list[int | None], i: int, j: int) -> bool:
    """True when one region is an ancestor of the other."""

    def ancestors(k: int) -> set[int]:
        seen: set[int] = set()
        p = parents[k]
        while p is not None and p not in seen:
            seen.add(p)
            p = parents[p]
        return seen

    return i in ancestors(j) or j in ancestors(i)


def _topological_order(parents: list[int | None]) -> list[int]:
    """Indices ordered parents-before-children."""
    order: list[int] = []
    seen: set[int] = set()

    def visit(i: int) -> None:
        if i in seen:
            return
        if parents[i] is not None:
            visit(parents[i])
        seen.add(i)
        order.append(i)

    for i in range(len(parents)):
        visit(i)
    return order


def cosine(fmap: PatchFeatureMap, p: tuple[int, int], q: tuple[int, int]) -> float:
    """Cosine similarity between the feature vectors of patches p and q.

    Bit-identical vectors return exactly 1.0; float32 storage would
    otherwise leave the self-similarity an ulp off.
    """
    for r, c in (p, q):
        if not (0 <= r < fmap.height and 0 <= c < fmap.width):
            raise IndexError(f"patch ({r}, {c}) outside {fmap.height}x{fmap.width} grid")
    a = fmap.data[p[0], p[1]].astype(np.float64)
    b = fmap.data[q[0], q[1]].astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
