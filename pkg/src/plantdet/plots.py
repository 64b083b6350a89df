"""Matplotlib figures written next to the CSV/JSON outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalResult  # noqa: E402


def plot_pr_curves(result: EvalResult, path) -> Path:
    """One precision/recall curve per class with ground truth, AP in the legend."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 5))
    for c, curve in enumerate(result.curves):
        if not result.n_gt[c]:
            continue
        r = np.concatenate([[0.0], curve.recall])
        p = np.concatenate([[1.0], curve.precision])
        ax.plot(r, p, lw=1.2, label=f"{result.class_names[c]} {result.ap[c]:.3f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curves, mAP@0.5 = {result.map50:.3f}")
    if len(ax.lines) <= 12:
        ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curves(history: list[dict], path) -> Path:
    """Loss components per epoch on the left, evaluated mAP/P/R on the right."""
    path = Path(path)
    epochs = [h["epoch"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss", "box", "obj", "cls"):
        a1.plot(epochs, [h[key] for h in history], label=key, lw=1.2)
    a1.set_yscale("log")
    a1.set_xlabel("epoch")
    a1.set_title("training loss")
    a1.legend(fontsize=8)
    ev = [h for h in history if h.get("map50") is not None]
    for key in ("map50", "precision", "recall"):
        a2.plot([h["epoch"] for h in ev], [h[key] for h in ev], marker="o", ms=3, label=key)
    a2.set_ylim(0, 1.02)
    a2.set_xlabel("epoch")
    a2.set_title("evaluation")
    a2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
