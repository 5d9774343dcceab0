"""Pseudo-event extraction from adjacent grayscale frames.

The filter chain is log-difference -> clip/ignore -> min-max normalization.
It turns a pair of frames into a signed map that mimics what an event camera
would report for the inter-frame motion.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import DimensionMismatch, GrayImage, InvalidParams, SignedMap


@dataclass(frozen=True)
class FilterParams:
    """Clip bound alpha, ignore threshold beta, and log offset epsilon."""

    alpha: float = 0.1
    beta: float = 0.005
    epsilon: float = 1e-3

    def __post_init__(self):
        if not (self.alpha > self.beta >= 0.0):
            raise InvalidParams(f"FilterParams: need alpha > beta >= 0, got alpha={self.alpha} beta={self.beta}")
        if not self.epsilon > 0.0:
            raise InvalidParams(f"FilterParams: need epsilon > 0, got {self.epsilon}")


def log_diff(i1: GrayImage, i2: GrayImage, epsilon: float) -> np.ndarray:
    """Per-pixel ln(i1 + eps) - ln(i2 + eps).

    epsilon=0 is accepted for strictly positive images (used to check that the
    chain is invariant under global exposure scaling).
    """
    if (i1.width, i1.height) != (i2.width, i2.height):
        raise DimensionMismatch("log_diff: images must have equal dimensions")
    if epsilon < 0.0:
        raise InvalidParams(f"log_diff: epsilon must be >= 0, got {epsilon}")
    return np.log(i1.data + epsilon) - np.log(i2.data + epsilon)


def clip_ignore(x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Clamp magnitudes to alpha and zero entries with magnitude <= beta (strict keep)."""
    if not alpha > beta:
        raise InvalidParams(f"clip_ignore: need alpha > beta, got alpha={alpha} beta={beta}")
    if beta < 0.0:
        raise InvalidParams(f"clip_ignore: need beta >= 0, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(np.abs(x), alpha) * np.sign(x) * (np.abs(x) > beta)


def min_max_norm(x: np.ndarray) -> np.ndarray:
    """Affinely rescale to [-1, 1]; a constant input maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def apply_filter(i1: GrayImage, i2: GrayImage, params: FilterParams) -> SignedMap:
    """Full chain: min_max_norm(clip_ignore(log_diff(i1, i2)))."""
    out = min_max_norm(clip_ignore(log_diff(i1, i2, params.epsilon), params.alpha, params.beta))
    return SignedMap(i1.width, i1.height, out)


def extract_motion(prev: GrayImage, curr: GrayImage, params: FilterParams) -> SignedMap:
    """Pseudo-event map of the motion between two temporally adjacent frames."""
    return apply_filter(prev, curr, params)


StyleHook = Callable[[SignedMap], SignedMap]


def night_style_hook(e_me: SignedMap, hook: Optional[StyleHook] = None) -> SignedMap:
    """Apply an optional style transform to a pseudo-event map (identity by default)."""
    if hook is None:
        return e_me
    return hook(e_me)


def salt_pepper_hook(density: float, seed: int) -> StyleHook:
    """Built-in style hook: seeded salt-and-pepper perturbation.

    Each pixel is independently selected with probability `density` and forced
    to -1 or +1 (fair coin); the result is re-clamped to [-1, 1].
    """
    if not 0.0 <= density <= 1.0:
        raise InvalidParams(f"salt_pepper_hook: density must be in [0, 1], got {density}")

    def hook(m: SignedMap) -> SignedMap:
        rng = np.random.default_rng(seed)
        hit = rng.random(m.data.shape) < density
        polarity = np.where(rng.random(m.data.shape) < 0.5, -1.0, 1.0)
        data = np.where(hit, polarity, m.data)
        return SignedMap(m.width, m.height, np.clip(data, -1.0, 1.0))

    return hook
