"""Instance selection, part attachment, mask fusion, and granularity scoring.

The pipeline turns confident divide-stage masks into per-instance
hierarchies: instances dominate the masks they heavily overlap, remaining
masks attach as parts by containment, conquer masks enrich the hierarchy
through NMS fusion, and every surviving mask receives a continuous
granularity

    g = (sqrt(A) - sqrt(A_min)) / (sqrt(A_max) - sqrt(A_min)) * 0.9 + 0.1

relative to its own hierarchy (g = 1.0 when A_min = A_max).

Label interchange format (JSON, stable key order):

    {"image_id": str, "height": int, "width": int,
     "hierarchies": [{"instance_id": int, "root": GM, "children": [GM, ...]}]}

    GM = {"mask": {"size": [H, W], "counts": [...]}, "granularity": float,
          "confidence": float, "level": "instance" | "part" | "conquer" | "gt"}
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import masks as mk
from .conquer import ThresholdSchedule, conquer_masks
from .divide import DivideConfig, filter_confident, maskcut
from .features import PatchFeatureMap
from .masks import ScoredMask
from .validation import check_granularity, check_point

__all__ = [
    "HierarchyConfig",
    "GranularMask",
    "MaskHierarchy",
    "PseudoLabelSet",
    "select_instances",
    "assign_parts",
    "fuse_masks",
    "assign_granularity",
    "granularity_scores",
    "build_pseudolabels",
    "merge_gt",
    "query_mask",
    "aggregate_proposals",
    "labels_to_json",
    "labels_from_json",
    "save_labels",
    "load_labels",
]

LEVELS = ("instance", "part", "conquer", "gt")


@dataclass
class HierarchyConfig:
    tau_area: float = 0.02
    tau_overlap: float = 0.8
    nms_iou: float = 0.9
    g_floor: float = 0.1
    g_span: float = 0.9
    # part assignment: containment(part, instance) by default; "iou" uses
    # plain IoU as the paper's Stage 2 text literally reads
    part_metric: str = "containment"
    # Stage 2 dominance quantifier: compare against all confident masks
    # ("all", default) or only instance candidates ("candidates")
    dominance_scope: str = "all"

    def __post_init__(self) -> None:
        for name in ("tau_area", "tau_overlap", "nms_iou", "g_floor", "g_span"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if abs(self.g_floor + self.g_span - 1.0) > 1e-12:
            raise ValueError("g_floor + g_span must equal 1.0")
        if self.part_metric not in ("containment", "iou"):
            raise ValueError(f"unknown part_metric {self.part_metric!r}")
        if self.dominance_scope not in ("all", "candidates"):
            raise ValueError(f"unknown dominance_scope {self.dominance_scope!r}")


@dataclass(frozen=True)
class GranularMask:
    """One mask of a hierarchy with its granularity score."""

    mask: dict  # RLE
    granularity: float
    confidence: float
    instance_id: int
    level: str

    def __post_init__(self) -> None:
        check_granularity(self.granularity)
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")

    def pixels(self) -> np.ndarray:
        return mk.rle_decode(self.mask)

    def to_dict(self) -> dict:
        return {
            "mask": self.mask,
            "granularity": self.granularity,
            "confidence": self.confidence,
            "level": self.level,
        }


@dataclass
class MaskHierarchy:
    instance_id: int
    root: GranularMask
    children: list[GranularMask] = field(default_factory=list)

    def all_masks(self) -> list[GranularMask]:
        return [self.root, *self.children]


@dataclass
class PseudoLabelSet:
    image_id: str
    height: int
    width: int
    hierarchies: list[MaskHierarchy] = field(default_factory=list)

    def all_masks(self) -> list[GranularMask]:
        return [gm for h in self.hierarchies for gm in h.all_masks()]


def select_instances(
    m_high: list[ScoredMask], image_area: int, cfg: HierarchyConfig
) -> tuple[list[ScoredMask], list[ScoredMask]]:
    """Split confident masks into dominating instances and the rest.

    A mask is an instance when its area ratio reaches tau_area and it is at
    least as large as every confident mask it overlaps at tau_overlap IoU.
    """
    inst_idx, rest_idx = _select_instance_indices(m_high, image_area, cfg)
    return [m_high[i] for i in inst_idx], [m_high[i] for i in rest_idx]


def _select_instance_indices(
    m_high: list[ScoredMask], image_area: int, cfg: HierarchyConfig
) -> tuple[list[int], list[int]]:
    areas = [mk.area(m.mask) for m in m_high]
    ratio_ok = [a / image_area >= cfg.tau_area for a in areas]

    def dominates(i: int, scope: list[int]) -> bool:
        return all(
            areas[i] >= areas[j]
            for j in scope
            if j != i and mk.iou(m_high[i].mask, m_high[j].mask) >= cfg.tau_overlap
        )

    everyone = list(range(len(m_high)))
    if cfg.dominance_scope == "all":
        inst = [i for i in everyone if ratio_ok[i] and dominates(i, everyone)]
    else:
        candidates = [i for i in everyone if ratio_ok[i]]
        inst = [i for i in candidates if dominates(i, candidates)]
    rest = [i for i in everyone if i not in inst]
    return inst, rest


def assign_parts(
    m_rest: list[ScoredMask], m_inst: list[ScoredMask], cfg: HierarchyConfig
) -> dict[int, list[ScoredMask]]:
    """Attach each leftover mask to its best-covering instance, or discard it.

    A mask attaches to the instance maximizing the part metric when that
    maximum exceeds tau_overlap; each mask attaches at most once. Keys are
    indices into m_inst.
    """
    parts: dict[int, list[ScoredMask]] = {i: [] for i in range(len(m_inst))}
    for m in m_rest:
        if not m.mask.any():
            continue
        best, best_score = -1, -1.0
        for i, inst in enumerate(m_inst):
            if cfg.part_metric == "containment":
                score = mk.containment(m.mask, inst.mask)
            else:
                score = mk.iou(m.mask, inst.mask)
            if score > best_score:
                best, best_score = i, score
        if best >= 0 and best_score > cfg.tau_overlap:
            source = "gt" if m.source == "gt" else "part"
            parts[best].append(ScoredMask(mask=m.mask, confidence=m.confidence, source=source))
    return parts


def fuse_masks(
    root: ScoredMask,
    parts: list[ScoredMask],
    conquer: list[ScoredMask],
    cfg: HierarchyConfig,
) -> list[ScoredMask]:
    """NMS over {root} ∪ parts ∪ conquer with the root forced to survive.

    Remaining masks are considered in (confidence desc, area desc, arrival
    order) and kept while their IoU with every kept mask stays below
    nms_iou. The root is returned first, tagged "instance" unless it came
    from a ground-truth mask.
    """
    root_source = "gt" if root.source == "gt" else "instance"
    root = ScoredMask(mask=root.mask, confidence=root.confidence, source=root_source)
    rest = list(parts) + list(conquer)
    order = sorted(
        range(len(rest)),
        key=lambda i: (-rest[i].confidence, -mk.area(rest[i].mask), i),
    )
    kept = [root]
    for i in order:
        if all(mk.iou(rest[i].mask, k.mask) < cfg.nms_iou for k in kept):
            kept.append(rest[i])
    return kept


def granularity_scores(areas: list[int], g_floor: float = 0.1, g_span: float = 0.9) -> list[float]:
    """Continuous granularity from relative sqrt-area within one hierarchy."""
    if not areas:
        return []
    if any(a <= 0 for a in areas):
        raise ValueError("granularity is undefined for zero-area masks")
    roots = [math.sqrt(a) for a in areas]
    lo, hi = min(roots), max(roots)
    if hi == lo:
        return [1.0] * len(areas)
    return [(r - lo) / (hi - lo) * g_span + g_floor for r in roots]


def assign_granularity(
    m_final: list[ScoredMask],
    instance_id: int,
    cfg: HierarchyConfig | None = None,
) -> list[GranularMask]:
    """Score every fused mask of one instance per the relative-area rule."""
    if not m_final:
        raise ValueError("cannot assign granularity to an empty mask set")
    cfg = cfg or HierarchyConfig()
    areas = [mk.area(m.mask) for m in m_final]
    scores = granularity_scores(areas, cfg.g_floor, cfg.g_span)
    out = []
    for m, g in zip(m_final, scores):
        level = m.source if m.source in LEVELS else "conquer"
        out.append(
            GranularMask(
                mask=mk.rle_encode(m.mask),
                granularity=g,
                confidence=m.confidence,
                instance_id=instance_id,
                level=level,
            )
        )
    return out


def merge_gt(m_divide: list[ScoredMask], m_gt: list[np.ndarray]) -> list[ScoredMask]:
    """Union divide-stage masks with trusted ground-truth masks.

    GT masks enter at confidence 1.0; bit-equal duplicates collapse keeping
    GT provenance.
    """
    for g in m_gt:
        if m_divide and g.shape != m_divide[0].mask.shape:
            raise ValueError(f"GT mask shape {g.shape} != divide mask shape {m_divide[0].mask.shape}")
    gt_keys = {np.packbits(g).tobytes() for g in m_gt}
    out = [m for m in m_divide if np.packbits(m.mask).tobytes() not in gt_keys]
    seen: set[bytes] = set()
    for g in m_gt:
        key = np.packbits(g).tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(ScoredMask(mask=g, confidence=1.0, source="gt"))
    return out


def build_pseudolabels(
    fmap: PatchFeatureMap,
    divide_cfg: DivideConfig | None = None,
    schedule: ThresholdSchedule | None = None,
    hier_cfg: HierarchyConfig | None = None,
    image_id: str = "image",
    patch_size: int = 16,
    gt_masks: list[np.ndarray] | None = None,
) -> PseudoLabelSet:
    """Run divide -> filter -> select -> parts -> conquer -> fuse -> score.

    All stage work happens at patch resolution; masks are upsampled by
    patch_size before serialization so granularities reflect pixel areas.
    Optional pixel-resolution GT masks join the confident set at
    confidence 1.0 (the lightly-supervised variant).
    """
    divide_cfg = divide_cfg or DivideConfig()
    schedule = schedule or ThresholdSchedule()
    hier_cfg = hier_cfg or HierarchyConfig()

    height, width = fmap.height * patch_size, fmap.width * patch_size
    confident = filter_confident(maskcut(fmap, divide_cfg), divide_cfg.tau_conf)
    pixel_high = [
        ScoredMask(mask=mk.upsample(m.mask, patch_size), confidence=m.confidence, source=m.source)
        for m in confident
    ]
    if gt_masks is not None:
        pixel_high = merge_gt(pixel_high, list(gt_masks))

    labels = PseudoLabelSet(image_id=image_id, height=height, width=width)
    if not pixel_high:
        warnings.warn(f"{image_id}: no confident masks; emitting an empty label set")
        return labels

    inst_idx, rest_idx = _select_instance_indices(pixel_high, height * width, hier_cfg)
    if not inst_idx:
        warnings.warn(f"{image_id}: no instance-level masks survived selection")
        return labels
    m_inst = [pixel_high[i] for i in inst_idx]
    m_rest = [pixel_high[i] for i in rest_idx]
    parts = assign_parts(m_rest, m_inst, hier_cfg)

    for k, inst in enumerate(m_inst):
        patch_region = mk.downsample(inst.mask, patch_size)
        conq = []
        if patch_region.any():
            conq = [
                ScoredMask(mask=mk.upsample(c.mask, patch_size), confidence=c.confidence, source="conquer")
                for c in conquer_masks(fmap, patch_region, schedule)
            ]
        fused = fuse_masks(inst, parts[k], conq, hier_cfg)
        scored = assign_granularity(fused, instance_id=k, cfg=hier_cfg)
        root, children = scored[0], scored[1:]
        labels.hierarchies.append(MaskHierarchy(instance_id=k, root=root, children=children))
    return labels


def query_mask(
    labels: PseudoLabelSet,
    point: tuple[int, int],
    g: float,
    clicks: list[tuple[int, int, bool]] | None = None,
) -> GranularMask | None:
    """Answer a (point, granularity) prompt from stored hierarchies.

    `point` is the first positive click as (x, y); extra clicks are
    (x, y, positive) refinements. Candidates contain every positive click
    and exclude every negative one; when none qualify, masks containing the
    first click are ranked by fewest violations. Nearest granularity wins,
    then smaller area, then lower instance id. Returns None when no mask
    contains the first click.
    """
    x, y = point
    check_point(x, y, labels.height, labels.width)
    check_granularity(g)
    positives = [(x, y)]
    negatives: list[tuple[int, int]] = []
    for cx, cy, pos in clicks or []:
        check_point(cx, cy, labels.height, labels.width)
        (positives if pos else negatives).append((cx, cy))

    scored: list[tuple[int, float, int, int, GranularMask]] = []
    for gm in labels.all_masks():
        px = gm.pixels()
        if not px[y, x]:
            continue
        violations = sum(1 for cx, cy in positives if not px[cy, cx])
        violations += sum(1 for cx, cy in negatives if px[cy, cx])
        scored.append((violations, abs(g - gm.granularity), mk.area(px), gm.instance_id, gm))
    if not scored:
        return None
    scored.sort(key=lambda t: t[:4])
    return scored[0][4]


def aggregate_proposals(
    labels: PseudoLabelSet,
    g_grid: list[float],
    conf_floor: float,
    max_masks: int = 1000,
) -> list[ScoredMask]:
    """Pool stored masks whose granularity falls in a half-step window of the grid.

    The window half-width is half the smallest grid spacing (0.05 for a
    single-point grid, matching the canonical 0.1-step sweep). Bit-equal
    masks are deduplicated keeping the highest confidence; results are
    sorted by confidence and capped at max_masks.
    """
    if not g_grid:
        return []
    grid = sorted(g_grid)
    if len(grid) > 1:
        step = min(b - a for a, b in zip(grid, grid[1:]))
    else:
        step = 0.1
    half = step / 2.0 + 1e-12

    best: dict[bytes, ScoredMask] = {}
    order: list[bytes] = []
    for gm in labels.all_masks():
        if not any(abs(gm.granularity - g) <= half for g in grid):
            continue
        if gm.confidence < conf_floor:
            continue
        px = gm.pixels()
        key = np.packbits(px).tobytes()
        if key not in best:
            best[key] = ScoredMask(mask=px, confidence=gm.confidence, source=gm.level)
            order.append(key)
        elif gm.confidence > best[key].confidence:
            best[key] = ScoredMask(mask=px, confidence=gm.confidence, source=gm.level)
    ranked = sorted(order, key=lambda k: -best[k].confidence)
    return [best[k] for k in ranked[:max_masks]]


def labels_to_json(labels: PseudoLabelSet) -> str:
    doc = {
        "image_id": labels.image_id,
        "height": labels.height,
        "width": labels.width,
        "hierarchies": [
            {
                "instance_id": h.instance_id,
                "root": h.root.to_dict(),
                "children": [c.to_dict() for c in h.children],
            }
            for h in labels.hierarchies
        ],
    }
    return json.dumps(doc, separators=(",", ":"))


def labels_from_json(text: str) -> PseudoLabelSet:
    doc = json.loads(text)
    hierarchies = []
    for h in doc["hierarchies"]:
        iid = int(h["instance_id"])
        root = _granular_from_dict(h["root"], iid)
        children = [_granular_from_dict(c, iid) for c in h["children"]]
        hierarchies.append(MaskHierarchy(instance_id=iid, root=root, children=children))
    return PseudoLabelSet(
        image_id=doc["image_id"],
        height=int(doc["height"]),
        width=int(doc["width"]),
        hierarchies=hierarchies,
    )


def _granular_from_dict(d: dict, instance_id: int) -> GranularMask:
    return GranularMask(
        mask={"size": [int(v) for v in d["mask"]["size"]], "counts": list(d["mask"]["counts"])},
        granularity=float(d["granularity"]),
        confidence=float(d["confidence"]),
        instance_id=instance_id,
        level=d["level"],
    )


def save_labels(labels: PseudoLabelSet, path: str | Path) -> None:
    Path(path).write_text(labels_to_json(labels))


def load_labels(path: str | Path) -> PseudoLabelSet:
    return labels_from_json(Path(path).read_text())
