"""Figure rendering for the CLI report paths. File output only (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_history_figure(history, path) -> None:
    """Loss curves and validation accuracy, one panel each."""
    epochs = [row.epoch for row in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [row.train_loss for row in history], label="train loss")
    ax_loss.plot(epochs, [row.val_loss for row in history], label="val loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("BCE")
    ax_loss.legend()
    ax_acc.plot(epochs, [row.val_acc for row in history], color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val frame accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_spotting_figure(probs, segments, threshold: float, path) -> None:
    """Per-frame probability curve with threshold line and predicted spans."""
    probs = np.asarray(probs, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(9, 3))
    ax.plot(np.arange(probs.shape[0]), probs, color="tab:blue", lw=1.2)
    ax.axhline(threshold, color="tab:red", ls="--", lw=0.8, label=f"threshold {threshold:g}")
    for seg in segments:
        ax.axvspan(seg.start, seg.end - 1, color="tab:green", alpha=0.25)
    ax.set_xlabel("frame")
    ax.set_ylabel("p(query present)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
