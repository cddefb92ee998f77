"""Binary mask representations and set-algebra kernels.

A binary mask is a 2D boolean ndarray (row-major, origin top-left). The
run-length encoding used for interchange is column-major with a leading
(possibly zero) background run, matching the COCO uncompressed convention:

    {"size": [H, W], "counts": [n0, n1, n2, ...]}

where n0 counts leading zeros in the column-major flattening and runs
alternate 0/1 afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .validation import check_mask, check_same_shape

__all__ = [
    "ScoredMask",
    "area",
    "iou",
    "containment",
    "connected_components",
    "rle_encode",
    "rle_decode",
    "nms",
    "upsample",
    "downsample",
]

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ScoredMask:
    """A binary mask with a confidence in [0, 1] and an origin tag."""

    mask: np.ndarray
    confidence: float
    source: str = "divide"

    def __post_init__(self) -> None:
        check_mask(self.mask)
        if not np.isfinite(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be finite in [0, 1], got {self.confidence}")


def area(m: np.ndarray) -> int:
    """Number of set pixels."""
    check_mask(m)
    return int(np.count_nonzero(m))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union. Two empty masks have IoU 0 by convention."""
    check_mask(a)
    check_mask(b)
    check_same_shape(a, b)
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return inter / union


def containment(part: np.ndarray, whole: np.ndarray) -> float:
    """Fraction of `part` covered by `whole`: |part ∩ whole| / |part|."""
    check_mask(part)
    check_mask(whole)
    check_same_shape(part, whole)
    part_area = np.count_nonzero(part)
    if part_area == 0:
        raise ValueError("containment is undefined for an empty part mask")
    return np.count_nonzero(part & whole) / part_area


def connected_components(m: np.ndarray, connectivity: int = 4) -> list[np.ndarray]:
    """Split a mask into connected components.

    Components are returned in scan order of their first (row-major) pixel
    and partition the input: pairwise disjoint, union equals `m`.
    """
    check_mask(m)
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _STRUCT_4 if connectivity == 4 else _STRUCT_8
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return []
    # scipy's label order already follows first-pixel scan order, but we
    # reorder explicitly so the contract does not depend on that detail.
    flat = labels.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nonzero = np.flatnonzero(flat)
    np.minimum.at(first, flat[nonzero], nonzero)
    order = np.argsort(first[1:], kind="stable")
    return [labels == lab + 1 for lab in order]


def rle_encode(m: np.ndarray) -> dict:
    """Encode a mask as column-major RLE with a leading background run."""
    check_mask(m)
    h, w = m.shape
    flat = m.ravel(order="F")
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [h, w], "counts": counts}


def rle_decode(r: dict) -> np.ndarray:
    """Decode a column-major RLE dict back to a boolean mask."""
    h, w = (int(v) for v in r["size"])
    counts = r["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    if any(c < 0 for c in counts):
        raise ValueError("RLE counts must be non-negative")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    return flat.reshape((h, w), order="F")


def nms(masks: list[ScoredMask], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in priority order.

    Priority is (confidence desc, area desc, original index asc). A mask is
    suppressed when its IoU with any kept higher-priority mask reaches the
    threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(
        range(len(masks)),
        key=lambda i: (-masks[i].confidence, -area(masks[i].mask), i),
    )
    kept: list[int] = []
    for i in order:
        if all(iou(masks[i].mask, masks[j].mask) < iou_threshold for j in kept):
            kept.append(i)
    return kept


def upsample(m: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling by patch footprint (each cell -> factor x factor)."""
    check_mask(m)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(m, factor, axis=0), factor, axis=1)


def downsample(m: np.ndarray, factor: int) -> np.ndarray:
    """Majority-vote downsampling; exact inverse of `upsample` for aligned masks."""
    check_mask(m)
    h, w = m.shape
    if h % factor or w % factor:
        raise ValueError(f"mask shape {m.shape} not divisible by factor {factor}")
    blocks = m.reshape(h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(1, 3)) * 2 >= factor * factor
