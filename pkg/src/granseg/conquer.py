"""Threshold-scheduled agglomerative merging inside an instance mask.

At each threshold theta, 4-adjacent patch pairs inside the region are
united when their feature cosine reaches theta; the union-find components
form one partition level. Because the edge set only grows as theta
decreases, components coarsen monotonically across the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import PatchFeatureMap
from .masks import ScoredMask
from .validation import check_mask

__all__ = [
    "DEFAULT_THETAS",
    "ThresholdSchedule",
    "LevelPartition",
    "UnionFind",
    "merge_at_threshold",
    "conquer_masks",
]

DEFAULT_THETAS = (0.9, 0.8, 0.7, 0.6, 0.5)


@dataclass
class ThresholdSchedule:
    thetas: tuple[float, ...] = DEFAULT_THETAS

    def __post_init__(self) -> None:
        self.thetas = tuple(float(t) for t in self.thetas)
        if not self.thetas:
            raise ValueError("threshold schedule must be nonempty")
        if any(not 0.0 < t < 1.0 for t in self.thetas):
            raise ValueError(f"thresholds must lie in (0, 1), got {self.thetas}")
        if any(b >= a for a, b in zip(self.thetas, self.thetas[1:])):
            raise ValueError(f"thresholds must be strictly decreasing, got {self.thetas}")


@dataclass
class LevelPartition:
    theta: float
    components: list[np.ndarray]


class UnionFind:
    """Union-find with path halving and union by size."""

    def __init__(self, n: int) -> None:
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, x: int, y: int) -> bool:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return False
        if self.size[rx] < self.size[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        self.size[rx] += self.size[ry]
        return True


def _region_edges(
    fmap: PatchFeatureMap, region: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All 4-adjacent in-region patch pairs and their cosines (flat indices)."""
    h, w = region.shape
    feats = fmap.flat.astype(np.float64)
    if not fmap.normalized:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    idx = np.arange(h * w).reshape(h, w)
    pairs_a, pairs_b = [], []
    both = region[:, :-1] & region[:, 1:]
    pairs_a.append(idx[:, :-1][both])
    pairs_b.append(idx[:, 1:][both])
    both = region[:-1, :] & region[1:, :]
    pairs_a.append(idx[:-1, :][both])
    pairs_b.append(idx[1:, :][both])
    a = np.concatenate(pairs_a)
    b = np.concatenate(pairs_b)
    cos = np.einsum("ij,ij->i", feats[a], feats[b])
    return a, b, cos


def merge_at_threshold(fmap: PatchFeatureMap, region: np.ndarray, theta: float) -> LevelPartition:
    """Partition the region by uniting 4-adjacent patches with cosine >= theta.

    Components are returned in scan order of their first patch; they are
    pairwise disjoint and cover the region exactly.
    """
    check_mask(region)
    if region.shape != (fmap.height, fmap.width):
        raise ValueError(f"region shape {region.shape} != patch grid {(fmap.height, fmap.width)}")
    if not region.any():
        raise ValueError("region must be nonempty")
    h, w = region.shape
    uf = UnionFind(h * w)
    a, b, cos = _region_edges(fmap, region)
    for i, j in zip(a[cos >= theta], b[cos >= theta]):
        uf.union(int(i), int(j))
    groups: dict[int, list[int]] = {}
    for p in np.flatnonzero(region.ravel()):
        groups.setdefault(uf.find(int(p)), []).append(int(p))
    components = []
    for members in sorted(groups.values(), key=lambda ms: ms[0]):
        comp = np.zeros(h * w, dtype=bool)
        comp[members] = True
        components.append(comp.reshape(h, w))
    return LevelPartition(theta=float(theta), components=components)


def conquer_masks(
    fmap: PatchFeatureMap,
    instance: np.ndarray,
    schedule: ThresholdSchedule,
    min_patches: int = 2,
) -> list[ScoredMask]:
    """Merge the instance at every threshold and pool the resulting components.

    Bit-identical components are deduplicated keeping the highest-theta
    occurrence; components smaller than min_patches are dropped. Each mask's
    confidence is the mean cosine over its internal 4-adjacent pairs,
    clamped to [0, 1].
    """
    check_mask(instance)
    if not instance.any():
        return []
    a, b, cos = _region_edges(fmap, instance)
    out: list[ScoredMask] = []
    seen: set[bytes] = set()
    for theta in schedule.thetas:
        level = merge_at_threshold(fmap, instance, theta)
        for comp in level.components:
            if int(comp.sum()) < min_patches:
                continue
            key = np.packbits(comp).tobytes()
            if key in seen:
                continue
            seen.add(key)
            flat = comp.ravel()
            inside = flat[a] & flat[b]
            conf = float(np.clip(cos[inside].mean(), 0.0, 1.0)) if inside.any() else 0.0
            out.append(ScoredMask(mask=comp, confidence=conf, source="conquer"))
    return out
