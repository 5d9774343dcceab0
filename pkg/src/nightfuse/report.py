"""Matplotlib figures rendered next to the delimited reports."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .trainer import TrainingLog  # noqa: E402


def save_training_curves(log: TrainingLog, path) -> None:
    """Loss curves per step plus held-out MIoU when evaluations were recorded."""
    steps = [r.step for r in log.steps]
    loss_src = [r.loss_source for r in log.steps]
    loss_tgt = [(np.nan if r.loss_target is None else r.loss_target) for r in log.steps]

    panels = 2 if log.evals else 1
    fig, axes = plt.subplots(1, panels, figsize=(5.5 * panels, 4.0))
    axes = np.atleast_1d(axes)

    ax = axes[0]
    ax.plot(steps, loss_src, label="source loss", lw=0.8)
    if not all(np.isnan(loss_tgt)):
        ax.plot(steps, loss_tgt, label="target loss", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")

    if log.evals:
        ax = axes[1]
        ax.plot([e.step for e in log.evals], [100 * e.miou_fused for e in log.evals],
                marker="o", label="MIoU fused")
        ax.plot([e.step for e in log.evals], [100 * e.miou_image for e in log.evals],
                marker="s", label="MIoU image")
        ax.set_xlabel("step")
        ax.set_ylabel("MIoU (%)")
        ax.legend()
        ax.set_title("held-out evaluation")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_chart(class_names: Sequence[str], iou: Sequence[Optional[float]],
                   miou_value: float, path) -> None:
    """Horizontal per-class IoU bars; undefined classes are drawn empty."""
    values = [0.0 if v is None or not np.isfinite(v) else 100.0 * v for v in iou]
    pos = np.arange(len(class_names))

    fig, ax = plt.subplots(figsize=(6.0, 0.35 * len(class_names) + 1.5))
    ax.barh(pos, values, color="#4878d0")
    ax.set_yticks(pos)
    ax.set_yticklabels(class_names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("IoU (%)")
    ax.set_xlim(0, 100)
    ax.axvline(100.0 * miou_value, color="#d65f5f", ls="--", lw=1.0,
               label=f"MIoU {100.0 * miou_value:.1f}%")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
