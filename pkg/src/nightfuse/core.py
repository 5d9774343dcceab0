"""Shared raster, event, and label containers.

Every container validates its invariants on construction and freezes its
payload arrays afterwards, so instances are safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Reserved label id for unlabeled pixels; excluded from every loss and metric.
IGNORE = 255


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(PipelineError):
    pass


class ValueOutOfRange(PipelineError):
    pass


class InvalidParams(PipelineError):
    pass


class ShiftTooLarge(PipelineError):
    pass


class EventOutOfBounds(PipelineError):
    pass


class NonFiniteInput(PipelineError):
    pass


class AllIgnored(PipelineError):
    pass


class ClassCountMismatch(PipelineError):
    pass


class NoDefinedClasses(PipelineError):
    pass


class ParseError(PipelineError):
    pass


class UnsortedTimestamps(PipelineError):
    pass


class NonFiniteLoss(PipelineError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _to_grid(width: int, height: int, data, name: str, dtype=np.float64) -> np.ndarray:
    if width < 1 or height < 1:
        raise DimensionMismatch(f"{name}: dimensions must be positive, got {width}x{height}")
    arr = np.array(data, dtype=dtype)
    if arr.size != width * height:
        raise DimensionMismatch(
            f"{name}: expected {width * height} values for {width}x{height}, got {arr.size}"
        )
    return arr.reshape(height, width)


@dataclass(frozen=True)
class GrayImage:
    """Dense grayscale raster, row-major, intensities in [0, 1]."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64, read-only

    def __post_init__(self):
        grid = _to_grid(self.width, self.height, self.data, "GrayImage")
        if not np.isfinite(grid).all():
            raise ValueOutOfRange("GrayImage: non-finite intensity value")
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise ValueOutOfRange("GrayImage: intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(grid))


@dataclass(frozen=True)
class SignedMap:
    """Dense signed raster, row-major, values in [-1, 1]."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64, read-only

    def __post_init__(self):
        grid = _to_grid(self.width, self.height, self.data, "SignedMap")
        if not np.isfinite(grid).all():
            raise ValueOutOfRange("SignedMap: non-finite value")
        if grid.min() < -1.0 or grid.max() > 1.0:
            raise ValueOutOfRange("SignedMap: values must lie in [-1, 1]")
        object.__setattr__(self, "data", _frozen(grid))


@dataclass(frozen=True)
class EventStream:
    """Time-ordered event records (t microseconds, x, y, polarity in {-1, +1})."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_width: int
    sensor_height: int

    def __post_init__(self):
        t = np.array(self.t, dtype=np.int64)
        x = np.array(self.x, dtype=np.int64)
        y = np.array(self.y, dtype=np.int64)
        p = np.array(self.p, dtype=np.int64)
        if not (t.ndim == x.ndim == y.ndim == p.ndim == 1):
            raise DimensionMismatch("EventStream: component arrays must be 1-D")
        if not (t.size == x.size == y.size == p.size):
            raise DimensionMismatch("EventStream: component arrays must have equal length")
        if t.size:
            if np.any(np.diff(t) < 0):
                raise UnsortedTimestamps("EventStream: timestamps must be non-decreasing")
            if x.min() < 0 or x.max() >= self.sensor_width:
                raise EventOutOfBounds("EventStream: x outside [0, sensor_width)")
            if y.min() < 0 or y.max() >= self.sensor_height:
                raise EventOutOfBounds("EventStream: y outside [0, sensor_height)")
            if not np.isin(p, (-1, 1)).all():
                raise ValueOutOfRange("EventStream: polarity must be -1 or +1")
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self) -> int:
        return int(self.t.size)

    @classmethod
    def from_records(cls, records, sensor_width: int, sensor_height: int) -> "EventStream":
        """Build a stream from an iterable of (t, x, y, p) tuples."""
        rows = list(records)
        if rows:
            t, x, y, p = (np.array(col) for col in zip(*rows))
        else:
            t = x = y = p = np.empty(0, dtype=np.int64)
        return cls(t, x, y, p, sensor_width, sensor_height)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class ids in {0..num_classes-1} plus the IGNORE sentinel."""

    width: int
    height: int
    labels: np.ndarray  # (height, width) int32, read-only
    num_classes: int

    def __post_init__(self):
        grid = _to_grid(self.width, self.height, self.labels, "LabelMask", dtype=np.int32)
        if not 1 <= self.num_classes < IGNORE:
            raise InvalidParams(f"LabelMask: num_classes must be in [1, {IGNORE}), got {self.num_classes}")
        known = (grid == IGNORE) | ((grid >= 0) & (grid < self.num_classes))
        if not known.all():
            raise ValueOutOfRange("LabelMask: label id outside {0..C-1} and not IGNORE")
        object.__setattr__(self, "labels", _frozen(grid))


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probability vectors; each pixel sums to 1 within 1e-9."""

    width: int
    height: int
    num_classes: int
    probs: np.ndarray  # (height, width, num_classes) float64, read-only

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64)
        expect = (self.height, self.width, self.num_classes)
        if arr.shape != expect:
            raise DimensionMismatch(f"ProbMap: expected shape {expect}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueOutOfRange("ProbMap: non-finite probability")
        if arr.min() < 0.0:
            raise ValueOutOfRange("ProbMap: negative probability")
        if np.abs(arr.sum(axis=2) - 1.0).max() > 1e-9:
            raise ValueOutOfRange("ProbMap: per-pixel probabilities must sum to 1 within 1e-9")
        object.__setattr__(self, "probs", _frozen(arr))


def to_grayscale(rgb: np.ndarray) -> GrayImage:
    """Convert an (H, W, 3) raster with channels in [0, 1] to a GrayImage.

    ITU-R BT.601 luma (0.299, 0.587, 0.114), evaluated so that gray inputs
    (R = G = B) map to themselves exactly despite float round-off.
    """
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatch(f"to_grayscale: expected (H, W, 3) raster, got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueOutOfRange("to_grayscale: channel values must be finite and in [0, 1]")
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    luma = b + 0.299 * (r - b) + 0.587 * (g - b)
    luma = np.clip(luma, 0.0, 1.0)
    return GrayImage(arr.shape[1], arr.shape[0], luma)
