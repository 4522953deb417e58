"""Salient slice selection for 3D volumes.

A volume is trimmed to the contiguous Z range that still contains
foreground, partitioned into seven depth regions, and the middle slice of
each region is kept. Selected slices are min-max normalized and resized to
a square target with bilinear interpolation. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError

NUM_SLICES = 7

DEFAULT_FG_THRESHOLD = 0.05
DEFAULT_MIN_FG_RATIO = 0.01
DEFAULT_TARGET_SIZE = 64
FULL_SCALE_TARGET_SIZE = 224


@dataclass
class Volume:
    """3D scan with voxels shaped (H, W, D) and optional acquisition metadata."""

    voxels: np.ndarray
    meta: Optional[object] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise DimensionError(f"volume voxels must be 3D, got {self.voxels.shape}")
        if min(self.voxels.shape) < 1:
            raise DimensionError(f"volume extents must be positive: {self.voxels.shape}")

    @property
    def height(self) -> int:
        return self.voxels.shape[0]

    @property
    def width(self) -> int:
        return self.voxels.shape[1]

    @property
    def depth(self) -> int:
        return self.voxels.shape[2]

    def slice_at(self, z: int) -> np.ndarray:
        return self.voxels[:, :, z]


@dataclass
class SliceSelection:
    """Result of trimming, partitioning, and selecting seven slices."""

    kept_range: tuple     # [z_lo, z_hi) that survived trimming
    boundaries: list      # region cut points over the trimmed depth, len 8
    selected: list        # global Z indices of the seven chosen slices
    slices: np.ndarray    # (7, target, target), values in [0, 1]


def trim_volume(volume: Volume, fg_threshold: float = DEFAULT_FG_THRESHOLD,
                min_fg_ratio: float = DEFAULT_MIN_FG_RATIO) -> tuple:
    """Smallest contiguous [z_lo, z_hi) containing every foreground slice.

    A slice counts as foreground when the fraction of its voxels with
    volume-normalized intensity above fg_threshold reaches min_fg_ratio.
    Normalizing per volume makes the decision invariant to global intensity
    scaling. Falls back to the full range when nothing qualifies.
    """
    if not (0.0 <= fg_threshold <= 1.0 and 0.0 <= min_fg_ratio <= 1.0):
        raise ContractError("fg_threshold and min_fg_ratio must lie in [0, 1]")
    v = volume.voxels
    lo, hi = v.min(), v.max()
    if hi > lo:
        normed = (v - lo) / (hi - lo)
    else:
        normed = np.zeros_like(v)
    fractions = (normed > fg_threshold).mean(axis=(0, 1))
    qualifying = np.nonzero(fractions >= min_fg_ratio)[0]
    if qualifying.size == 0:
        return (0, volume.depth)
    return (int(qualifying[0]), int(qualifying[-1]) + 1)


def partition_and_select(trimmed_depth: int) -> tuple:
    """Region boundaries and the per-region middle slice, local indices.

    Boundaries are v_i = floor(i * D / 7). With D >= 7 every region is
    non-empty and the middle index of region i is v_{i-1} + floor(len/2).
    With D < 7 the available indices repeat cyclically until seven slots
    are filled, keeping the downstream seven-slice contract intact.
    """
    d = int(trimmed_depth)
    if d < 1:
        raise ContractError("cannot partition an empty slice range")
    boundaries = [i * d // NUM_SLICES for i in range(NUM_SLICES + 1)]
    if d >= NUM_SLICES:
        selected = [
            boundaries[i - 1] + (boundaries[i] - boundaries[i - 1]) // 2
            for i in range(1, NUM_SLICES + 1)
        ]
    else:
        selected = [i % d for i in range(NUM_SLICES)]
    return boundaries, selected


def normalize_resize(image: np.ndarray, target: int) -> np.ndarray:
    """Min-max normalize to [0, 1], then bilinear-resize to target x target.

    A constant image (max == min) maps to all zeros; it carries no quality
    signal and this avoids dividing by zero.
    """
    if target < 1:
        raise ContractError("target extent must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2D slice, got shape {img.shape}")
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    return _resize_bilinear(img, target)


def _source_coords(n_src: int, n_dst: int) -> np.ndarray:
    # Endpoints map onto endpoints, so grid-aligned points keep their values.
    if n_dst == 1 or n_src == 1:
        return np.zeros(n_dst)
    return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)


def _resize_bilinear(img: np.ndarray, target: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (target, target):
        return img.copy()
    ys = _source_coords(h, target)
    xs = _source_coords(w, target)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = (1.0 - fx) * img[np.ix_(y0, x0)] + fx * img[np.ix_(y0, x1)]
    bottom = (1.0 - fx) * img[np.ix_(y1, x0)] + fx * img[np.ix_(y1, x1)]
    return (1.0 - fy) * top + fy * bottom


def select_slices(volume: Volume, target: int = DEFAULT_TARGET_SIZE,
                  fg_threshold: float = DEFAULT_FG_THRESHOLD,
                  min_fg_ratio: float = DEFAULT_MIN_FG_RATIO) -> SliceSelection:
    """Full pipeline: trim, partition, select, normalize, resize."""
    z_lo, z_hi = trim_volume(volume, fg_threshold, min_fg_ratio)
    boundaries, local = partition_and_select(z_hi - z_lo)
    selected = [z_lo + s for s in local]
    slices = np.stack([
        normalize_resize(volume.slice_at(z), target) for z in selected
    ])
    return SliceSelection(kept_range=(z_lo, z_hi), boundaries=boundaries,
                          selected=selected, slices=slices)


def center_slice(volume: Volume, target: int = DEFAULT_TARGET_SIZE) -> SliceSelection:
    """Single middle slice of the untrimmed volume.

    Used when salient selection is ablated away; the 3D scoring path then
    degrades to the 2D path on this one slice.
    """
    z = volume.depth // 2
    slices = normalize_resize(volume.slice_at(z), target)[None]
    return SliceSelection(kept_range=(0, volume.depth), boundaries=[],
                          selected=[z], slices=slices)
