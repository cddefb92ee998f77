"""Shared fixtures: deterministic synthetic scenes used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from granseg import (
    DivideConfig,
    HierarchyConfig,
    RegionSpec,
    SynthSpec,
    ThresholdSchedule,
    build_pseudolabels,
    synth_features,
)


def mask_from_rows(rows: list[str]) -> np.ndarray:
    """Build a mask from '.'/'#' art."""
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


@pytest.fixture(scope="session")
def three_instance_scene():
    """Three instances with one nested part each, over a noise background."""
    spec = SynthSpec(
        height=24,
        width=24,
        dim=128,
        regions=[
            RegionSpec("rectangle", (1, 1, 11, 11)),
            RegionSpec("rectangle", (4, 4, 8, 8), parent=0),
            RegionSpec("rectangle", (1, 13, 11, 23)),
            RegionSpec("ellipse", (3, 15, 9, 21), parent=2),
            RegionSpec("rectangle", (13, 1, 23, 11)),
            RegionSpec("rectangle", (16, 4, 20, 8), parent=4),
        ],
        noise_sigma=0.0,
        seed=11,
        background="noise",
        child_cos=(0.35, 0.65),
    )
    return synth_features(spec)


@pytest.fixture(scope="session")
def fixture_divide_cfg():
    return DivideConfig(tau_sim=0.3, eps_floor=1e-3, max_instances=6)


@pytest.fixture(scope="session")
def three_instance_labels(three_instance_scene, fixture_divide_cfg):
    return build_pseudolabels(
        three_instance_scene.features,
        fixture_divide_cfg,
        ThresholdSchedule(),
        HierarchyConfig(),
        image_id="fixture",
        patch_size=4,
    )
