"""Interactive click simulation and whole-image proposal evaluation.

The click protocol places the first click at the interior point of the
target farthest from its complement (4-connected city-block distance),
then alternates: compare prediction to ground truth, pick the largest
error region (false negatives give positive clicks, false positives give
negative clicks), and click its interior maximum. A session ends when the
recomputed IoU reaches the target or the click budget is spent.

Average recall follows the COCO convention: greedy one-to-one matching of
confidence-ranked proposals against ground truth at IoU thresholds
0.50:0.95:0.05, averaged over thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from . import masks as mk
from .hierarchy import PseudoLabelSet, load_labels, query_mask
from .masks import ScoredMask

__all__ = [
    "Click",
    "ClickSession",
    "Segmenter",
    "BenchmarkReport",
    "initial_click",
    "next_click",
    "simulate_session",
    "sweep_best",
    "one_click_iou",
    "average_recall",
    "run_benchmark",
    "HierarchyQuerySegmenter",
    "load_manifest",
]

AR_THRESHOLDS = tuple((50 + 5 * i) / 100.0 for i in range(10))
DEFAULT_G_GRID = tuple((i + 1) / 10.0 for i in range(10))


@dataclass(frozen=True)
class Click:
    x: int
    y: int
    positive: bool = True


@dataclass
class ClickSession:
    clicks: list[Click]
    ious: list[float]
    noc: int
    failed: bool
    g_used: float

    @property
    def final_iou(self) -> float:
        return self.ious[-1] if self.ious else 0.0


class Segmenter(Protocol):
    """Anything that can answer (clicks, granularity) prompts for an image."""

    def predict(self, image_ref: str, clicks: list[Click], g: float) -> np.ndarray: ...


def _interior_argmax(region: np.ndarray) -> tuple[int, int]:
    """Pixel of maximal 4-connected city-block distance to the complement.

    The image border counts as complement; ties resolve in scan order.
    Returns (x, y).
    """
    padded = np.pad(region, 1)
    dist = ndimage.distance_transform_cdt(padded, metric="taxicab")[1:-1, 1:-1]
    flat_idx = int(np.argmax(dist))  # argmax takes the first maximum in scan order
    r, c = divmod(flat_idx, region.shape[1])
    return int(c), int(r)


def initial_click(gt: np.ndarray) -> Click:
    """First positive click: deep interior point of the target."""
    mk.area(gt)  # validates
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    x, y = _interior_argmax(gt)
    return Click(x=x, y=y, positive=True)


def next_click(pred: np.ndarray, gt: np.ndarray) -> Click:
    """Corrective click in the interior of the largest error region."""
    if np.array_equal(pred, gt):
        raise ValueError("prediction equals ground truth; no next click")
    fn = gt & ~pred
    fp = pred & ~gt
    regions = [(c, True) for c in mk.connected_components(fn, connectivity=4)]
    regions += [(c, False) for c in mk.connected_components(fp, connectivity=4)]
    best, positive = max(regions, key=lambda rc: (int(rc[0].sum()), rc[1]))
    x, y = _interior_argmax(best)
    return Click(x=x, y=y, positive=positive)


def simulate_session(
    seg: Segmenter,
    image_ref: str,
    gt: np.ndarray,
    g: float,
    iou_target: float,
    max_clicks: int = 20,
) -> ClickSession:
    """Run the click protocol until the IoU target is met or the budget is spent.

    IoUs are recomputed from the returned masks, never trusted from the
    segmenter. Failures report noc = max_clicks with the failed flag set.
    """
    clicks = [initial_click(gt)]
    ious: list[float] = []
    while True:
        pred = seg.predict(image_ref, list(clicks), g)
        if pred is None:
            pred = np.zeros_like(gt)
        ious.append(mk.iou(pred, gt))
        if ious[-1] >= iou_target:
            return ClickSession(clicks=clicks, ious=ious, noc=len(clicks), failed=False, g_used=g)
        if len(clicks) >= max_clicks:
            return ClickSession(clicks=clicks, ious=ious, noc=max_clicks, failed=True, g_used=g)
        clicks.append(next_click(pred, gt))


def sweep_best(
    seg: Segmenter,
    image_ref: str,
    gt: np.ndarray,
    g_grid: list[float],
    iou_target: float,
    max_clicks: int = 20,
) -> ClickSession:
    """Best session over the granularity grid: fewest clicks, then higher final IoU, then lower g."""
    if not g_grid:
        raise ValueError("granularity grid must be nonempty")
    best: ClickSession | None = None
    for g in g_grid:
        s = simulate_session(seg, image_ref, gt, g, iou_target, max_clicks)
        if best is None or (s.noc, -s.final_iou, s.g_used) < (best.noc, -best.final_iou, best.g_used):
            best = s
    return best


def one_click_iou(seg: Segmenter, image_ref: str, gt: np.ndarray, g_grid: list[float]) -> float:
    """IoU from the first click alone, maximized over the granularity grid."""
    if not g_grid:
        raise ValueError("granularity grid must be nonempty")
    click = initial_click(gt)
    best = 0.0
    for g in g_grid:
        pred = seg.predict(image_ref, [click], g)
        if pred is None:
            continue
        best = max(best, mk.iou(pred, gt))
    return best


def average_recall(
    proposals: list[ScoredMask],
    gts: list[np.ndarray],
    max_dets: int = 1000,
) -> float:
    """Mean over IoU thresholds 0.50:0.95:0.05 of the matched-GT fraction."""
    if not gts:
        raise ValueError("ground-truth list must be nonempty")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, i))[:max_dets]
    if not order:
        return 0.0
    iou_matrix = np.zeros((len(order), len(gts)))
    for pi, i in enumerate(order):
        for j, gt in enumerate(gts):
            iou_matrix[pi, j] = mk.iou(proposals[i].mask, gt)
    recalls = []
    for t in AR_THRESHOLDS:
        matched = np.zeros(len(gts), dtype=bool)
        for pi in range(len(order)):
            cand = [j for j in range(len(gts)) if not matched[j] and iou_matrix[pi, j] >= t]
            if cand:
                matched[max(cand, key=lambda j: iou_matrix[pi, j])] = True
        recalls.append(matched.sum() / len(gts))
    return float(np.mean(recalls))


class HierarchyQuerySegmenter:
    """Neural-free segmenter answering prompts from stored pseudo-labels."""

    def __init__(self, labels_by_image: dict[str, PseudoLabelSet]):
        self.labels_by_image = dict(labels_by_image)

    def predict(self, image_ref: str, clicks: list[Click], g: float) -> np.ndarray:
        labels = self.labels_by_image[image_ref]
        first = next((c for c in clicks if c.positive), None)
        shape = (labels.height, labels.width)
        if first is None:
            return np.zeros(shape, dtype=bool)
        extra = [(c.x, c.y, c.positive) for c in clicks if c is not first]
        gm = query_mask(labels, (first.x, first.y), g, clicks=extra)
        if gm is None:
            return np.zeros(shape, dtype=bool)
        return gm.pixels()


@dataclass
class BenchmarkReport:
    name: str
    noc: dict[str, float]  # e.g. {"NoC80": 1.0, "NoC90": 2.5}
    one_iou: float
    instances: int
    images: int
    failures: dict[str, int]
    config: dict

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "noc": self.noc,
            "one_iou": self.one_iou,
            "instances": self.instances,
            "images": self.images,
            "failures": self.failures,
            "config": self.config,
        }

    def to_text(self) -> str:
        headers = ["dataset", *self.noc.keys(), "1-IoU", "instances"]
        values = [
            self.name,
            *(f"{v:.2f}" for v in self.noc.values()),
            f"{self.one_iou * 100:.1f}",
            str(self.instances),
        ]
        widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
        line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
        vals = "  ".join(v.ljust(w) for v, w in zip(values, widths))
        return f"{line}\n{vals}"


def load_manifest(path: str | Path) -> dict:
    """Load and sanity-check a dataset manifest, enumerating missing files."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if "name" not in doc or "items" not in doc:
        raise ValueError(f"{path}: manifest needs 'name' and 'items'")
    if not doc["items"]:
        raise ValueError(f"{path}: manifest lists no items")
    missing = []
    for item in doc["items"]:
        for key in ("features", "gt_labels"):
            p = Path(item[key])
            if not p.is_absolute():
                p = path.parent / p
            if not p.exists():
                missing.append(str(p))
            item[key] = str(p)
    if missing:
        raise FileNotFoundError("manifest references missing files: " + ", ".join(missing))
    return doc


def run_benchmark(
    seg: Segmenter,
    manifest: dict,
    iou_targets: list[float] | None = None,
    g_grid: list[float] | None = None,
    max_clicks: int = 20,
) -> BenchmarkReport:
    """Evaluate a segmenter over every mask of every manifest item.

    Each stored mask (roots and children) counts as one ground-truth
    instance; NoC means are over all instances with failures counted at
    max_clicks.
    """
    iou_targets = list(iou_targets or (0.8, 0.9))
    g_grid = list(g_grid or DEFAULT_G_GRID)
    noc_sums = {t: 0.0 for t in iou_targets}
    fail_counts = {t: 0 for t in iou_targets}
    iou_sum = 0.0
    n_instances = 0
    for item in manifest["items"]:
        labels = load_labels(item["gt_labels"])
        for gm in labels.all_masks():
            gt = gm.pixels()
            if not gt.any():
                continue
            n_instances += 1
            for t in iou_targets:
                session = sweep_best(seg, item["image_id"], gt, g_grid, t, max_clicks)
                noc_sums[t] += session.noc
                fail_counts[t] += int(session.failed)
            iou_sum += one_click_iou(seg, item["image_id"], gt, g_grid)
    if n_instances == 0:
        raise ValueError("manifest produced no nonempty ground-truth masks")
    return BenchmarkReport(
        name=manifest["name"],
        noc={f"NoC{int(t * 100)}": noc_sums[t] / n_instances for t in iou_targets},
        one_iou=iou_sum / n_instances,
        instances=n_instances,
        images=len(manifest["items"]),
        failures={f"NoC{int(t * 100)}": fail_counts[t] for t in iou_targets},
        config={"iou_targets": iou_targets, "g_grid": g_grid, "max_clicks": max_clicks},
    )
