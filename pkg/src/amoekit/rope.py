"""Aspect-normalized 2-D rotary coordinates with golden-angle directions.

Patch centers are mapped so that x spans ``±sqrt(W/H)`` and y spans
``±sqrt(H/W)``; the grid always covers the same area whatever the
resolution, so rotary phases depend on aspect ratio and relative position
only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ShapeMismatch, ValidationError

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class CoordinateGrid:
    positions: np.ndarray  # (grid_h * grid_w, 2) as (x, y), row-major over patches
    grid_h: int
    grid_w: int
    x_bound: float
    y_bound: float


@dataclass(frozen=True)
class DirectionSet:
    directions: np.ndarray  # (pairs, 2) unit vectors
    base_frequencies: np.ndarray  # (pairs,)


def axis_bounds(width_px: float, height_px: float) -> tuple[float, float]:
    return math.sqrt(width_px / height_px), math.sqrt(height_px / width_px)


def normalized_grid(width_px: int, height_px: int, patch_size: int = 16) -> CoordinateGrid:
    """Patch-center coordinates; the extreme centers sit exactly on the bounds.

    A single patch row or column collapses to coordinate 0 on that axis.
    """
    if width_px <= 0 or height_px <= 0 or patch_size <= 0:
        raise ValidationError("image size and patch size must be positive")
    gw = -(-width_px // patch_size)
    gh = -(-height_px // patch_size)
    xb, yb = axis_bounds(width_px, height_px)
    xs = np.linspace(-xb, xb, gw) if gw > 1 else np.zeros(1)
    ys = np.linspace(-yb, yb, gh) if gh > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    positions = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return CoordinateGrid(positions, gh, gw, xb, yb)


def golden_directions(num_pairs: int, seed_angle: float = 0.0, base: float = 100.0) -> DirectionSet:
    """Unit directions at successive golden-angle steps.

    Frequencies fall geometrically from 1 to ``base**(-(num_pairs-1)/num_pairs)``.
    """
    if num_pairs < 1:
        raise ValidationError("num_pairs must be >= 1")
    if not base > 0:
        raise ValidationError("base must be positive")
    theta = seed_angle + GOLDEN_ANGLE * np.arange(num_pairs)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    freqs = base ** (-np.arange(num_pairs) / num_pairs)
    return DirectionSet(dirs, freqs)


def phases_at(positions, dirs: DirectionSet) -> np.ndarray:
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if pos.shape[1] != 2 or dirs.directions.shape[1] != 2:
        raise ShapeMismatch("positions and directions must be 2-D")
    if dirs.directions.shape[0] != dirs.base_frequencies.shape[0]:
        raise ShapeMismatch("one base frequency per direction is required")
    return (pos @ dirs.directions.T) * dirs.base_frequencies


def rotary_phases(grid: CoordinateGrid, dirs: DirectionSet) -> np.ndarray:
    """``phase[p, k] = freq[k] * <position[p], direction[k]>``."""
    return phases_at(grid.positions, dirs)


def apply_rotary(x, phases) -> np.ndarray:
    """Rotate consecutive channel pairs of ``x`` (patches, 2*pairs) by ``phases``."""
    x = np.asarray(x, dtype=np.float64)
    ph = np.asarray(phases, dtype=np.float64)
    if x.shape[0] != ph.shape[0] or x.shape[1] != 2 * ph.shape[1]:
        raise ShapeMismatch(f"features {x.shape} do not match phases {ph.shape}")
    a, b = x[:, 0::2], x[:, 1::2]
    c, s = np.cos(ph), np.sin(ph)
    out = np.empty_like(x)
    out[:, 0::2] = a * c - b * s
    out[:, 1::2] = a * s + b * c
    return out
