"""Granularity-scored mask hierarchies from patch features.

Divide-and-conquer pseudo-labeling, promptable (point, granularity)
queries, click-simulation benchmarks, and a toy granularity-conditioned
mask decoder.
"""

from .conquer import DEFAULT_THETAS, LevelPartition, ThresholdSchedule, conquer_masks, merge_at_threshold
from .divide import AffinityGraph, DivideConfig, build_affinity, filter_confident, maskcut, ncut_value, spectral_bipartition
from .features import (
    PatchFeatureMap,
    RegionSpec,
    SynthResult,
    SynthSpec,
    cosine,
    read_features,
    synth_features,
    write_features,
)
from .hierarchy import (
    GranularMask,
    HierarchyConfig,
    MaskHierarchy,
    PseudoLabelSet,
    aggregate_proposals,
    assign_granularity,
    assign_parts,
    build_pseudolabels,
    fuse_masks,
    load_labels,
    merge_gt,
    query_mask,
    save_labels,
    select_instances,
)
from .masks import ScoredMask, area, connected_components, containment, iou, nms, rle_decode, rle_encode

__version__ = "0.1.0"
