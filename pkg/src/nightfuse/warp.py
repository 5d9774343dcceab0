"""Depth-based reprojection from the frame camera into the event camera view.

Forward splatting with a z-buffer: each source pixel with valid depth is
back-projected, rigidly transformed, projected into the target camera, and
written to the nearest target pixel, nearest depth winning. Target pixels
never written stay masked invalid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import IGNORE, DimensionMismatch, GrayImage, InvalidParams, LabelMask, _frozen

DEFAULT_OUT_SIZE = (640, 480)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParams(f"CameraIntrinsics: focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3 orthonormal, det +1) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidParams(f"RigidTransform: rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise InvalidParams("RigidTransform: rotation is not orthonormal (1e-9)")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidParams("RigidTransform: rotation determinant must be +1 (1e-9)")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters; 0 or NaN marks an invalid pixel."""

    width: int
    height: int
    depth: np.ndarray

    def __post_init__(self):
        arr = np.array(self.depth, dtype=np.float64)
        if arr.shape != (self.height, self.width):
            arr = arr.reshape(self.height, self.width) if arr.size == self.width * self.height else arr
        if arr.shape != (self.height, self.width):
            raise DimensionMismatch(f"DepthMap: expected {self.width}x{self.height}, got shape {arr.shape}")
        finite = np.isfinite(arr)
        if np.any(finite & (arr < 0)):
            raise InvalidParams("DepthMap: valid depths must be positive")
        if np.any(np.isinf(arr)):
            raise InvalidParams("DepthMap: depths must be finite or NaN")
        object.__setattr__(self, "depth", _frozen(arr))

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(frozen=True)
class WarpResult:
    image: GrayImage
    valid: np.ndarray   # (height, width) bool; True where a source pixel landed
    depth: np.ndarray   # (height, width) target-frame depth where valid, NaN elsewhere


def _splat(depth: DepthMap, k_src: CameraIntrinsics, k_dst: CameraIntrinsics,
           transform: RigidTransform, out_size: Tuple[int, int]):
    """Shared forward-splat geometry; returns target (rows, cols), z, source flat indices."""
    out_w, out_h = out_size
    valid = depth.valid_mask()
    ys, xs = np.nonzero(valid)
    d = depth.depth[ys, xs]

    pts = np.stack([(xs - k_src.cx) / k_src.fx * d, (ys - k_src.cy) / k_src.fy * d, d])
    pts = transform.rotation @ pts + transform.translation[:, None]
    z = pts[2]
    front = z > 0
    ys, xs, z = ys[front], xs[front], z[front]
    u = np.rint(k_dst.fx * pts[0, front] / z + k_dst.cx).astype(np.int64)
    v = np.rint(k_dst.fy * pts[1, front] / z + k_dst.cy).astype(np.int64)

    inside = (u >= 0) & (u < out_w) & (v >= 0) & (v < out_h)
    ys, xs, z, u, v = ys[inside], xs[inside], z[inside], u[inside], v[inside]
    src_flat = ys * depth.width + xs
    # Write far-to-near so the nearest source pixel ends up in the buffer;
    # ties resolved by source index for determinism.
    order = np.lexsort((src_flat, -z))
    return v[order], u[order], z[order], src_flat[order]


def warp_to_event_frame(
    img: GrayImage,
    depth: DepthMap,
    k_src: CameraIntrinsics,
    k_dst: CameraIntrinsics,
    transform: RigidTransform,
    out_size: Tuple[int, int] = DEFAULT_OUT_SIZE,
) -> WarpResult:
    """Warp a grayscale image into the target camera; unwritten pixels are masked."""
    if (img.width, img.height) != (depth.width, depth.height):
        raise DimensionMismatch("warp_to_event_frame: image and depth dimensions differ")
    out_w, out_h = out_size
    rows, cols, z, src = _splat(depth, k_src, k_dst, transform, out_size)

    out = np.zeros((out_h, out_w), dtype=np.float64)
    zbuf = np.full((out_h, out_w), np.nan)
    mask = np.zeros((out_h, out_w), dtype=bool)
    out[rows, cols] = img.data.ravel()[src]
    zbuf[rows, cols] = z
    mask[rows, cols] = True
    return WarpResult(GrayImage(out_w, out_h, out), _frozen(mask), _frozen(zbuf))


def warp_labels(
    mask: LabelMask,
    depth: DepthMap,
    k_src: CameraIntrinsics,
    k_dst: CameraIntrinsics,
    transform: RigidTransform,
    out_size: Tuple[int, int] = DEFAULT_OUT_SIZE,
) -> LabelMask:
    """Nearest-neighbor label warp with the same geometry; invalid pixels get IGNORE."""
    if (mask.width, mask.height) != (depth.width, depth.height):
        raise DimensionMismatch("warp_labels: mask and depth dimensions differ")
    out_w, out_h = out_size
    rows, cols, _, src = _splat(depth, k_src, k_dst, transform, out_size)

    out = np.full((out_h, out_w), IGNORE, dtype=np.int32)
    out[rows, cols] = mask.labels.ravel()[src]
    return LabelMask(out_w, out_h, out, mask.num_classes)
