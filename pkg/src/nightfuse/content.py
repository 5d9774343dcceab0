"""Content map extraction by differencing an image against shifted copies of itself.

Flat regions cancel and edge structure survives, which strips most of the
day/night appearance while keeping scene layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import GrayImage, InvalidParams, ShiftTooLarge, SignedMap
from .motion import FilterParams, clip_ignore, log_diff, min_max_norm


@dataclass(frozen=True)
class ContentParams:
    """Shift magnitude gamma (pixels), filter parameters, and sign-draw seed."""

    gamma: int = 1
    filter: FilterParams = field(default_factory=FilterParams)
    seed: int = 0

    def __post_init__(self):
        if not (isinstance(self.gamma, int) and self.gamma >= 1):
            raise InvalidParams(f"ContentParams: gamma must be an integer >= 1, got {self.gamma!r}")


def shift_image(img: GrayImage, dx: int, dy: int) -> GrayImage:
    """Translate by (dx, dy) pixels, replicating the nearest edge into vacated borders.

    Positive dx moves content right, positive dy moves content down.
    """
    if abs(dx) >= img.width or abs(dy) >= img.height:
        raise ShiftTooLarge(f"shift_image: |shift| ({dx}, {dy}) must be smaller than {img.width}x{img.height}")
    cols = np.clip(np.arange(img.width) - dx, 0, img.width - 1)
    rows = np.clip(np.arange(img.height) - dy, 0, img.height - 1)
    return GrayImage(img.width, img.height, img.data[np.ix_(rows, cols)])


def extract_content(
    img: GrayImage,
    params: ContentParams,
    fixed_shift: Optional[Tuple[int, int]] = None,
) -> SignedMap:
    """Average of the filter chain against a horizontally and a vertically shifted copy.

    Shift signs are drawn independently and uniformly from {+gamma, -gamma}
    using params.seed; pass fixed_shift=(dx, dy) with |dx| = |dy| = gamma to
    pin them for reproducible pipelines.
    """
    if fixed_shift is not None:
        sx, sy = fixed_shift
        if abs(sx) != params.gamma or abs(sy) != params.gamma:
            raise InvalidParams(
                f"extract_content: fixed_shift magnitudes must equal gamma={params.gamma}, got {fixed_shift}"
            )
    else:
        rng = np.random.default_rng(params.seed)
        sx = params.gamma if rng.random() < 0.5 else -params.gamma
        sy = params.gamma if rng.random() < 0.5 else -params.gamma

    fp = params.filter
    x_term = min_max_norm(clip_ignore(log_diff(img, shift_image(img, sx, 0), fp.epsilon), fp.alpha, fp.beta))
    y_term = min_max_norm(clip_ignore(log_diff(img, shift_image(img, 0, sy), fp.epsilon), fp.alpha, fp.beta))
    return SignedMap(img.width, img.height, 0.5 * x_term + 0.5 * y_term)
