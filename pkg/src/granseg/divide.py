"""Instance discovery via iterative normalized-cut bipartition.

The affinity graph binarizes patch cosine similarity: weight 1 where
cosine >= tau_sim, a small positive floor elsewhere, so the graph stays
connected and degrees stay positive. Bipartition follows Shi-Malik: the
second-largest eigenvector of N = D^-1/2 W D^-1/2 is found by power
iteration on N + I with deflation against the known top eigenvector
D^1/2 * 1, then the sign pattern of the generalized eigenvector
y = D^-1/2 v splits the patches. Masks are peeled off iteratively by
resetting the affinities of extracted patches to the floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import PatchFeatureMap
from .masks import ScoredMask, connected_components

__all__ = [
    "DivideConfig",
    "AffinityGraph",
    "build_affinity",
    "spectral_bipartition",
    "ncut_value",
    "maskcut",
    "filter_confident",
]


@dataclass
class DivideConfig:
    tau_sim: float = 0.15
    eps_floor: float = 1e-6
    max_instances: int = 8
    tau_conf: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_sim < 1.0:
            raise ValueError(f"tau_sim must be in (0, 1), got {self.tau_sim}")
        if self.eps_floor <= 0:
            raise ValueError(f"eps_floor must be > 0, got {self.eps_floor}")
        if not 0.0 <= self.tau_conf <= 1.0:
            raise ValueError(f"tau_conf must be in [0, 1], got {self.tau_conf}")
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")


@dataclass
class AffinityGraph:
    """Symmetric non-negative patch affinity with unit diagonal."""

    weights: np.ndarray  # (n, n) float64
    degenerate: bool = False  # all off-diagonal weights hit 1 (no structure)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def build_affinity(fmap: PatchFeatureMap, cfg: DivideConfig) -> AffinityGraph:
    """Binarized cosine affinity over all patches (row-major node order)."""
    feats = fmap.flat.astype(np.float64)
    if not fmap.normalized:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
    cos = feats @ feats.T
    weights = np.where(cos >= cfg.tau_sim, 1.0, cfg.eps_floor)
    np.fill_diagonal(weights, 1.0)
    n = weights.shape[0]
    degenerate = n > 1 and bool(np.all(weights == 1.0))
    return AffinityGraph(weights=weights, degenerate=degenerate)


def spectral_bipartition(
    graph: AffinityGraph,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-way normalized cut of the affinity graph.

    Returns (foreground, fiedler): a boolean node mask for the foreground
    side and the generalized eigenvector whose sign pattern defines the
    split. The foreground is the side holding the maximum-|entry| of the
    eigenvector (ties: smaller side, then the side of the lowest node).

    Raises RuntimeError if power iteration fails to converge.
    """
    w = graph.weights
    n = graph.n
    if n == 1:
        return np.array([True]), np.zeros(1)
    deg = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm_w = w * inv_sqrt[:, None] * inv_sqrt[None, :]  # N = D^-1/2 W D^-1/2
    top = np.sqrt(deg)
    top /= np.linalg.norm(top)  # known top eigenvector of N, eigenvalue 1

    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v -= (top @ v) * top
    nv = np.linalg.norm(v)
    if nv == 0:  # pathological start, deterministic fallback
        v = np.zeros(n)
        v[0] = 1.0
        v -= (top @ v) * top
        nv = np.linalg.norm(v)
    v /= nv

    # Power iteration on (N + I) keeps the target eigenvalue largest in
    # magnitude (spectrum shifted into [0, 2]); deflating the top pair and
    # re-orthogonalizing each step isolates the second eigenvector. When
    # several eigenvalues tie within O(eps_floor) the residual plateaus at
    # the degeneracy floor; any vector in that span cuts equally well, so
    # iteration stops once the residual stalls.
    best = v
    best_resid = np.inf
    stall = 0
    for _ in range(max_iter):
        z = norm_w @ v + v
        z -= (top @ z) * top
        nz = np.linalg.norm(z)
        if nz < 1e-300:
            raise RuntimeError("power iteration collapsed to the zero vector")
        z /= nz
        lam = float(z @ (norm_w @ z + z))
        resid = norm_w @ z + z - lam * z
        resid -= (top @ resid) * top
        r = float(np.max(np.abs(resid)))
        v = z
        if r < best_resid * (1.0 - 1e-3):
            best, best_resid, stall = z, r, 0
        else:
            stall += 1
        if r <= tol:
            best, best_resid = z, r
            break
        if stall >= 200:
            break
    if best_resid > 1e-3:
        raise RuntimeError(
            f"power iteration did not converge (residual {best_resid:.2e} after {max_iter} iterations)"
        )
    v = best

    fiedler = inv_sqrt * v  # generalized eigenvector of (D - W) y = mu D y
    pos = fiedler > 0
    if pos.all() or (~pos).all():
        # sign split degenerated; fall back to a median split
        pos = fiedler > np.median(fiedler)
        if pos.all() or (~pos).all():
            pos = np.arange(n) < n // 2

    amax = np.max(np.abs(fiedler))
    pos_has_max = bool(np.any(np.abs(fiedler[pos]) >= amax - 1e-15))
    neg_has_max = bool(np.any(np.abs(fiedler[~pos]) >= amax - 1e-15))
    if pos_has_max and not neg_has_max:
        fg = pos
    elif neg_has_max and not pos_has_max:
        fg = ~pos
    else:  # both sides tie on |entry|: smaller side, then lowest node index
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos != n_neg:
            fg = pos if n_pos < n_neg else ~pos
        else:
            fg = pos if pos[0] else ~pos
    return fg, fiedler


def ncut_value(graph: AffinityGraph, side: np.ndarray) -> float:
    """Ncut(A, B) = cut/assoc(A) + cut/assoc(B) for a boolean bipartition."""
    w = graph.weights
    a = np.asarray(side, dtype=bool)
    if a.all() or (~a).all():
        return float("inf")
    cut = float(w[a][:, ~a].sum())
    deg = w.sum(axis=1)
    return cut / float(deg[a].sum()) + cut / float(deg[~a].sum())


def _mask_confidence(cos_ok: np.ndarray, idx: np.ndarray) -> float:
    """Fraction of intra-mask patch pairs whose cosine clears tau_sim."""
    k = idx.size
    if k < 2:
        return 0.0
    sub = cos_ok[np.ix_(idx, idx)]
    pairs = (sub.sum() - k) / 2.0  # off-diagonal, unordered
    return float(pairs / (k * (k - 1) / 2.0))


def maskcut(fmap: PatchFeatureMap, cfg: DivideConfig) -> list[ScoredMask]:
    """Iteratively peel foreground masks off the patch affinity graph.

    Each extracted mask is restricted to its largest 4-connected component
    of the patch grid; its confidence is the fraction of intra-mask patch
    pairs with cosine >= tau_sim. Extraction stops at max_instances, when
    the foreground collapses below two patches, or when the cut repeats.
    """
    h, w = fmap.height, fmap.width
    graph = build_affinity(fmap, cfg)
    if graph.degenerate or graph.n < 2:
        return []
    cos_ok = graph.weights == 1.0  # intra-pair indicator at tau_sim

    weights = graph.weights.copy()
    masks: list[ScoredMask] = []
    seen: set[bytes] = set()
    claimed = np.zeros(h * w, dtype=bool)
    for _ in range(cfg.max_instances):
        try:
            fg, _ = spectral_bipartition(AffinityGraph(weights=weights))
        except RuntimeError:
            break
        # The max-|entry| side is tried first, but on feature maps with
        # incoherent regions the eigenvector's energy can sit on the
        # structureless side; fall back to the complement when the chosen
        # side yields no affinity-supported component.
        comp = _coherent_component(fg & ~claimed, cos_ok, (h, w))
        if int(comp.sum()) < 2:
            comp = _coherent_component(~fg & ~claimed, cos_ok, (h, w))
        if int(comp.sum()) < 2:
            break
        key = np.packbits(comp).tobytes()
        if key in seen:
            break
        seen.add(key)
        idx = np.flatnonzero(comp.ravel())
        conf = _mask_confidence(cos_ok, idx)
        masks.append(ScoredMask(mask=comp, confidence=conf))
        claimed[idx] = True
        weights[idx, :] = cfg.eps_floor
        weights[:, idx] = cfg.eps_floor
        np.fill_diagonal(weights, 1.0)
    return masks


def _first_pixel(m: np.ndarray) -> int:
    return int(np.flatnonzero(m.ravel())[0])


def _largest_component(m: np.ndarray) -> np.ndarray:
    comps = connected_components(m, connectivity=4)
    if not comps:
        return np.zeros_like(m)
    return max(comps, key=lambda c: (int(c.sum()), -_first_pixel(c)))


def _coherent_component(side: np.ndarray, cos_ok: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Largest connected component of `side`, pruned to affinity-supported patches.

    The sign split assigns near-zero eigenvector entries arbitrarily, so a
    component can pick up patches with no real affinity to it; members
    lacking an intra-mask edge are stripped and the largest component
    re-taken until stable.
    """
    h, w = shape
    comp = _largest_component(side.reshape(h, w))
    while comp.any():
        idx = np.flatnonzero(comp.ravel())
        support = cos_ok[np.ix_(idx, idx)].sum(axis=1) > 1  # beyond the diagonal
        if support.all():
            break
        trimmed = np.zeros(h * w, dtype=bool)
        trimmed[idx[support]] = True
        comp = _largest_component(trimmed.reshape(h, w))
    return comp


def filter_confident(masks: list[ScoredMask], tau_conf: float) -> list[ScoredMask]:
    """Masks whose confidence clears tau_conf, order preserved."""
    return [m for m in masks if m.confidence >= tau_conf]
