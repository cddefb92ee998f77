import json
import math

import numpy as np
import pytest

from granseg.hierarchy import (
    GranularMask,
    HierarchyConfig,
    MaskHierarchy,
    PseudoLabelSet,
    aggregate_proposals,
    assign_granularity,
    assign_parts,
    build_pseudolabels,
    fuse_masks,
    granularity_scores,
    labels_from_json,
    labels_to_json,
    merge_gt,
    query_mask,
    select_instances,
)
from granseg.divide import DivideConfig
from granseg.features import SynthSpec, synth_features
from granseg.masks import ScoredMask, area, containment, iou, rle_encode


def box(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def gm(mask, g, conf=1.0, iid=0, level="conquer"):
    return GranularMask(mask=rle_encode(mask), granularity=g, confidence=conf, instance_id=iid, level=level)


# --- select_instances ---------------------------------------------------------


def test_select_single_large_mask():
    m = ScoredMask(box(10, 10, 0, 0, 5, 10), 0.9)  # ratio 0.5
    inst, rest = select_instances([m], 100, HierarchyConfig())
    assert inst == [m] and rest == []


def test_select_dominance_near_duplicates():
    a = box(20, 20, 0, 0, 10, 10)  # area 100
    b = box(20, 20, 0, 0, 10, 9)  # area 90, IoU 0.9
    assert iou(a, b) >= 0.8
    inst, rest = select_instances([ScoredMask(a, 0.5), ScoredMask(b, 0.9)], 400, HierarchyConfig())
    assert len(inst) == 1 and area(inst[0].mask) == 100
    assert len(rest) == 1 and area(rest[0].mask) == 90


def test_select_small_ratio_goes_to_rest():
    m = ScoredMask(box(100, 100, 0, 0, 2, 2), 0.9)  # ratio 4e-4 < 0.02
    inst, rest = select_instances([m], 10000, HierarchyConfig())
    assert inst == [] and rest == [m]


# --- assign_parts ---------------------------------------------------------------


def test_assign_part_inside_instance():
    inst = ScoredMask(box(10, 10, 0, 0, 8, 8), 0.9)
    part = ScoredMask(box(10, 10, 2, 2, 5, 5), 0.7)
    parts = assign_parts([part], [inst], HierarchyConfig())
    assert len(parts[0]) == 1
    assert np.array_equal(parts[0][0].mask, part.mask)


def test_assign_part_straddling_discarded():
    a = ScoredMask(box(10, 20, 0, 0, 10, 10), 0.9)
    b = ScoredMask(box(10, 20, 0, 10, 10, 20), 0.9)
    straddle = ScoredMask(box(10, 20, 4, 8, 6, 12), 0.5)  # half in each
    assert containment(straddle.mask, a.mask) == 0.5
    parts = assign_parts([straddle], [a, b], HierarchyConfig())
    assert parts[0] == [] and parts[1] == []


def test_assign_parts_no_instances():
    part = ScoredMask(box(4, 4, 0, 0, 2, 2), 0.5)
    assert assign_parts([part], [], HierarchyConfig()) == {}


def test_assign_parts_iou_metric_flag():
    inst = ScoredMask(box(10, 10, 0, 0, 10, 10), 0.9)
    small = ScoredMask(box(10, 10, 0, 0, 3, 3), 0.9)
    cfg = HierarchyConfig(part_metric="iou")
    parts = assign_parts([small], [inst], cfg)
    assert parts[0] == []  # IoU 9/100 < 0.8: strict parts can never attach
    cfg2 = HierarchyConfig()
    assert len(assign_parts([small], [inst], cfg2)[0]) == 1


# --- fuse_masks ------------------------------------------------------------------


def test_fuse_duplicates_collapse():
    root = ScoredMask(box(8, 8, 0, 0, 8, 8), 0.9)
    dup = ScoredMask(box(8, 8, 0, 0, 4, 4), 0.8)
    dup2 = ScoredMask(box(8, 8, 0, 0, 4, 4), 0.7)
    fused = fuse_masks(root, [dup], [dup2], HierarchyConfig())
    assert len(fused) == 2  # root + one of the duplicates
    assert fused[1].confidence == 0.8


def test_fuse_nested_survive():
    root = ScoredMask(box(10, 10, 0, 0, 10, 10), 0.9)
    mid = ScoredMask(box(10, 10, 0, 0, 5, 10), 0.8)
    small = ScoredMask(box(10, 10, 0, 0, 2, 10), 0.7)
    fused = fuse_masks(root, [mid], [small], HierarchyConfig())
    assert len(fused) == 3


def test_fuse_empty_parts_and_conquer():
    root = ScoredMask(box(4, 4, 0, 0, 4, 4), 0.6)
    fused = fuse_masks(root, [], [], HierarchyConfig())
    assert len(fused) == 1 and fused[0].source == "instance"


def test_fuse_root_always_survives():
    root = ScoredMask(box(8, 8, 0, 0, 8, 8), 0.1)
    clone = ScoredMask(box(8, 8, 0, 0, 8, 8), 0.99)  # higher conf duplicate of root
    fused = fuse_masks(root, [clone], [], HierarchyConfig())
    assert len(fused) == 1 and fused[0].source == "instance"


# --- granularity -----------------------------------------------------------------


def test_granularity_endpoints_exact():
    gs = granularity_scores([4, 64, 25])
    assert gs[0] == 0.1
    assert gs[1] == 1.0


def test_granularity_hand_value():
    # (sqrt(25) - sqrt(4)) / (sqrt(64) - sqrt(4)) * 0.9 + 0.1 = 0.55
    gs = granularity_scores([4, 64, 25])
    assert gs[2] == pytest.approx(0.55, abs=1e-12)


def test_granularity_matches_direct_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a_min = int(rng.integers(1, 1000))
        a_max = a_min + int(rng.integers(1, 10000))
        a_i = int(rng.integers(a_min, a_max + 1))
        g = granularity_scores([a_min, a_max, a_i])[2]
        expect = (math.sqrt(a_i) - math.sqrt(a_min)) / (math.sqrt(a_max) - math.sqrt(a_min)) * 0.9 + 0.1
        assert abs(g - expect) <= 1e-12


def test_granularity_monotone_in_area():
    rng = np.random.default_rng(1)
    areas = sorted(int(a) for a in rng.integers(1, 10_000, size=30))
    gs = granularity_scores(areas)
    assert all(b >= a for a, b in zip(gs, gs[1:]))


def test_granularity_degenerate_single_area():
    assert granularity_scores([7, 7, 7]) == [1.0, 1.0, 1.0]


def test_granularity_zero_area_rejected():
    with pytest.raises(ValueError):
        granularity_scores([0, 5])


def test_assign_granularity_levels_and_ids():
    root = ScoredMask(box(8, 8, 0, 0, 8, 8), 0.9, source="instance")
    part = ScoredMask(box(8, 8, 0, 0, 4, 4), 0.8, source="part")
    out = assign_granularity([root, part], instance_id=3)
    assert out[0].level == "instance" and out[0].granularity == 1.0
    assert out[1].level == "part" and out[1].granularity == 0.1
    assert all(g.instance_id == 3 for g in out)


# --- merge_gt --------------------------------------------------------------------


def test_merge_gt_identity_and_empty():
    d = [ScoredMask(box(4, 4, 0, 0, 2, 2), 0.5)]
    assert merge_gt(d, []) == d
    out = merge_gt([], [box(4, 4, 0, 0, 3, 3)])
    assert len(out) == 1 and out[0].confidence == 1.0 and out[0].source == "gt"


def test_merge_gt_bit_equal_dedupe():
    m = box(4, 4, 1, 1, 3, 3)
    out = merge_gt([ScoredMask(m, 0.5)], [m.copy()])
    assert len(out) == 1
    assert out[0].source == "gt" and out[0].confidence == 1.0


def test_merge_gt_resolution_mismatch():
    with pytest.raises(ValueError):
        merge_gt([ScoredMask(box(4, 4, 0, 0, 2, 2), 0.5)], [box(5, 5, 0, 0, 2, 2)])


# --- build_pseudolabels ------------------------------------------------------------


def test_end_to_end_three_instances(three_instance_labels):
    labels = three_instance_labels
    assert len(labels.hierarchies) == 3
    for h in labels.hierarchies:
        assert h.root.granularity == 1.0
        root_px = h.root.pixels()
        for c in h.children:
            assert containment(c.pixels(), root_px) >= 0.8
            assert c.granularity <= 1.0


def test_end_to_end_deterministic(three_instance_scene, fixture_divide_cfg, three_instance_labels):
    again = build_pseudolabels(
        three_instance_scene.features,
        fixture_divide_cfg,
        image_id="fixture",
        patch_size=4,
    )
    assert labels_to_json(again) == labels_to_json(three_instance_labels)


def test_featureless_map_empty_labels():
    res = synth_features(SynthSpec(height=8, width=8, dim=64, regions=[], seed=5, background="noise"))
    with pytest.warns(UserWarning):
        labels = build_pseudolabels(res.features, DivideConfig(tau_sim=0.9), image_id="flat", patch_size=2)
    assert labels.hierarchies == []
    assert (labels.height, labels.width) == (16, 16)


def test_gt_fusion_adds_hierarchy(three_instance_scene, fixture_divide_cfg):
    res = three_instance_scene
    gt = np.zeros((96, 96), dtype=bool)
    gt[48:92, 48:92] = True  # over the background corner, patch_size 4
    labels = build_pseudolabels(
        res.features, fixture_divide_cfg, image_id="gt", patch_size=4, gt_masks=[gt]
    )
    assert len(labels.hierarchies) == 4
    gt_roots = [h for h in labels.hierarchies if h.root.level == "gt"]
    assert len(gt_roots) == 1
    assert np.array_equal(gt_roots[0].root.pixels(), gt)


# --- query_mask ----------------------------------------------------------------------


def make_labelset():
    h = w = 16
    root = gm(box(h, w, 0, 0, 12, 12), 1.0, conf=0.9, iid=0, level="instance")
    mid = gm(box(h, w, 2, 2, 10, 10), 0.6, conf=0.8, iid=0)
    inner = gm(box(h, w, 4, 4, 7, 7), 0.1, conf=0.7, iid=0)
    hier = MaskHierarchy(instance_id=0, root=root, children=[mid, inner])
    return PseudoLabelSet(image_id="q", height=h, width=w, hierarchies=[hier])


def test_query_single_candidate():
    labels = make_labelset()
    got = query_mask(labels, (11, 11), 0.1)  # only the root contains (11, 11)
    assert got is not None and got.level == "instance"


def test_query_nearest_granularity():
    labels = make_labelset()
    got = query_mask(labels, (5, 5), 0.15)
    assert got.granularity == 0.1
    got = query_mask(labels, (5, 5), 1.0)
    assert got.granularity == 1.0
    got = query_mask(labels, (5, 5), 0.5)
    assert got.granularity == 0.6


def test_query_background_none():
    labels = make_labelset()
    assert query_mask(labels, (15, 15), 0.5) is None


def test_query_negative_click_filters():
    labels = make_labelset()
    # (9,9) lies in root and mid but not inner: a negative click there
    # leaves the inner mask as the only clean candidate at any g
    got = query_mask(labels, (5, 5), 1.0, clicks=[(9, 9, False)])
    assert got.granularity == 0.1
    # extra positive click: candidates must contain both
    got = query_mask(labels, (5, 5), 0.1, clicks=[(11, 11, True)])
    assert got.granularity == 1.0  # only root contains (11,11)


def test_query_violation_fallback():
    labels = make_labelset()
    # contradictory clicks: no mask contains (5,5) and excludes it; fall back to fewest violations
    got = query_mask(labels, (5, 5), 0.1, clicks=[(5, 5, False)])
    assert got is not None
    assert got.granularity == 0.1


def test_query_out_of_bounds():
    labels = make_labelset()
    with pytest.raises(ValueError):
        query_mask(labels, (99, 0), 0.5)


def test_query_contains_first_click_property():
    labels = make_labelset()
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y = int(rng.integers(0, 16)), int(rng.integers(0, 16))
        g = float(rng.uniform(0.1, 1.0))
        got = query_mask(labels, (x, y), g)
        if got is not None:
            assert got.pixels()[y, x]


# --- aggregate_proposals ----------------------------------------------------------------


def test_aggregate_all_and_none():
    labels = make_labelset()
    grid = [round(0.1 * k, 1) for k in range(1, 11)]
    out = aggregate_proposals(labels, grid, conf_floor=0.0)
    assert len(out) == 3
    assert aggregate_proposals(labels, grid, conf_floor=1.1) == []


def test_aggregate_half_step_window():
    labels = make_labelset()  # granularities 1.0, 0.6, 0.1
    out = aggregate_proposals(labels, [0.35], conf_floor=0.0)  # single-point grid, step 0.1
    assert out == []
    out = aggregate_proposals(labels, [0.6], conf_floor=0.0)
    assert len(out) == 1


def test_aggregate_confidence_ranking_and_cap():
    labels = make_labelset()
    out = aggregate_proposals(labels, [round(0.1 * k, 1) for k in range(1, 11)], conf_floor=0.0, max_masks=2)
    assert len(out) == 2
    assert out[0].confidence >= out[1].confidence


# --- serialization ------------------------------------------------------------------------


def test_labels_json_roundtrip(three_instance_labels):
    text = labels_to_json(three_instance_labels)
    back = labels_from_json(text)
    assert labels_to_json(back) == text
    doc = json.loads(text)
    assert list(doc.keys()) == ["image_id", "height", "width", "hierarchies"]
    gm0 = doc["hierarchies"][0]["root"]
    assert list(gm0.keys()) == ["mask", "granularity", "confidence", "level"]
