"""Event stream windowing and voxel grid encoding.

Events are binned into B temporal slices with bilinear weights, so each
event's polarity is split between the two nearest bins and the grid total
equals the polarity sum of the encoded window.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EventOutOfBounds, EventStream, InvalidParams, SignedMap, _frozen
from .motion import min_max_norm

DEFAULT_BINS = 5
DEFAULT_WINDOW_US = 50_000


@dataclass(frozen=True)
class WindowSpec:
    """Half-open lookback window [anchor - duration, anchor) in microseconds."""

    anchor_ts: int
    duration_us: int = DEFAULT_WINDOW_US

    def __post_init__(self):
        if self.duration_us <= 0:
            raise InvalidParams(f"WindowSpec: duration must be positive, got {self.duration_us}")


@dataclass(frozen=True)
class VoxelGrid:
    """Dense (bins, height, width) temporal histogram of event polarities."""

    bins: int
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        expect = (self.bins, self.height, self.width)
        if self.bins < 1 or self.width < 1 or self.height < 1:
            raise InvalidParams(f"VoxelGrid: bins and dimensions must be positive, got {expect}")
        if arr.shape != expect:
            raise InvalidParams(f"VoxelGrid: expected shape {expect}, got {arr.shape}")
        object.__setattr__(self, "data", _frozen(arr))


def select_window(stream: EventStream, spec: WindowSpec) -> EventStream:
    """Events with t in [anchor - duration, anchor), order preserved."""
    start = spec.anchor_ts - spec.duration_us
    lo = int(np.searchsorted(stream.t, start, side="left"))
    hi = int(np.searchsorted(stream.t, spec.anchor_ts, side="left"))
    return EventStream(
        stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi],
        stream.sensor_width, stream.sensor_height,
    )


def voxelize(stream: EventStream, bins: int = DEFAULT_BINS,
             width: Optional[int] = None, height: Optional[int] = None) -> VoxelGrid:
    """Deposit each event's polarity into the grid with bilinear temporal weights.

    Timestamps are normalized to [0, bins - 1] over the window's own span; a
    single-timestamp (or empty) window puts all mass in bin 0. Events are
    accumulated in a canonical order so the result does not depend on the
    relative order of equal-timestamp events.
    """
    if bins < 1:
        raise InvalidParams(f"voxelize: bins must be >= 1, got {bins}")
    width = stream.sensor_width if width is None else width
    height = stream.sensor_height if height is None else height
    grid = np.zeros(bins * height * width, dtype=np.float64)
    n = len(stream)
    if n == 0:
        return VoxelGrid(bins, width, height, grid.reshape(bins, height, width))

    order = np.lexsort((stream.p, stream.x, stream.y, stream.t))
    t = stream.t[order].astype(np.float64)
    x = stream.x[order]
    y = stream.y[order]
    p = stream.p[order].astype(np.float64)
    if x.max() >= width or y.max() >= height or x.min() < 0 or y.min() < 0:
        raise EventOutOfBounds(f"voxelize: event coordinates outside {width}x{height}")

    span = t[-1] - t[0]
    if span == 0.0 or bins == 1:
        tstar = np.zeros(n)
    else:
        tstar = (t - t[0]) / span * (bins - 1)
    k = np.floor(tstar)
    frac = tstar - k
    k = k.astype(np.int64)

    base = y * width + x
    np.add.at(grid, k * height * width + base, p * (1.0 - frac))
    upper = k + 1 < bins
    np.add.at(grid, (k[upper] + 1) * height * width + base[upper], p[upper] * frac[upper])
    return VoxelGrid(bins, width, height, grid.reshape(bins, height, width))


def normalize_voxels(grid: VoxelGrid) -> VoxelGrid:
    """Min-max scale the whole grid to [-1, 1]; a constant grid maps to zeros."""
    return VoxelGrid(grid.bins, grid.width, grid.height, min_max_norm(grid.data))


def collapse_to_map(grid: VoxelGrid) -> SignedMap:
    """Sum over bins and min-max normalize, yielding the model-facing event map."""
    return SignedMap(grid.width, grid.height, min_max_norm(grid.data.sum(axis=0)))
