"""Confusion matrix accumulation, per-class IoU, and mean IoU."""
from __future__ import annotations

import numpy as np

from .core import (
    IGNORE,
    ClassCountMismatch,
    DimensionMismatch,
    LabelMask,
    NoDefinedClasses,
)

# Night street-scene schema (18 classes) and the 19-class variant with Truck.
CLASS_SCHEMAS = {
    "night-street-18": [
        "Road", "Sidewalk", "Building", "Wall", "Fence", "Pole",
        "Traffic Light", "Traffic Sign", "Vegetation", "Terrain", "Sky",
        "Person", "Rider", "Car", "Bus", "Train", "Motorcycle", "Bicycle",
    ],
    "cityscapes-19": [
        "Road", "Sidewalk", "Building", "Wall", "Fence", "Pole",
        "Traffic Light", "Traffic Sign", "Vegetation", "Terrain", "Sky",
        "Person", "Rider", "Car", "Truck", "Bus", "Train", "Motorcycle", "Bicycle",
    ],
}


class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray = None):
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise DimensionMismatch(f"ConfusionMatrix: counts must be {num_classes}x{num_classes}")
            self.counts = counts.copy()

    def add(self, gt: LabelMask, pred: LabelMask) -> "ConfusionMatrix":
        """Count every non-IGNORE ground-truth pixel into (gt, pred)."""
        if (gt.width, gt.height) != (pred.width, pred.height):
            raise DimensionMismatch("ConfusionMatrix.add: mask dimensions differ")
        if gt.num_classes != self.num_classes or pred.num_classes != self.num_classes:
            raise ClassCountMismatch(
                f"ConfusionMatrix.add: expected {self.num_classes} classes, "
                f"got gt={gt.num_classes} pred={pred.num_classes}"
            )
        g = gt.labels.ravel()
        p = pred.labels.ravel()
        keep = (g != IGNORE) & (p != IGNORE)
        flat = g[keep].astype(np.int64) * self.num_classes + p[keep]
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ClassCountMismatch("ConfusionMatrix.merge: class counts differ")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, gt: LabelMask, pred: LabelMask) -> ConfusionMatrix:
    return cm.add(gt, pred)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the class is absent from gt and pred."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)
    return iou


def miou(cm: ConfusionMatrix) -> float:
    """Mean of the defined per-class IoUs; undefined classes are excluded."""
    iou = iou_per_class(cm)
    defined = np.isfinite(iou)
    if not defined.any():
        raise NoDefinedClasses("miou: every class is absent from both masks")
    return float(iou[defined].mean())


def format_percent(value: float) -> str:
    """Render a [0, 1] score as a percentage with one decimal, e.g. 0.601 -> '60.1'."""
    return f"{100.0 * value:.1f}"
