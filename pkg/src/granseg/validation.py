"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_mask(m: np.ndarray) -> np.ndarray:
    """Validate a 2D boolean mask with positive dimensions."""
    if not isinstance(m, np.ndarray) or m.ndim != 2 or m.dtype != bool:
        raise TypeError("mask must be a 2D bool ndarray")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask dimensions must be >= 1, got {m.shape}")
    return m


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def check_point(x: int, y: int, height: int, width: int) -> None:
    """Validate pixel coordinates (x = column, y = row, origin top-left)."""
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"point ({x}, {y}) outside {width}x{height} image")


def check_granularity(g: float) -> float:
    if not np.isfinite(g) or not 0.1 <= g <= 1.0:
        raise ValueError(f"granularity must be in [0.1, 1.0], got {g}")
    return float(g)
