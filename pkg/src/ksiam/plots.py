"""Figure rendering for reports: ROC curves and training histories (PNG files)."""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # keep PNG bytes stable between runs
    "svg.hashsalt": "ksiam",
}

RocPoints = Sequence[tuple[float, float, float]]


def plot_roc(curves: Mapping[str, RocPoints], path: str | Path, title: str = "ROC") -> Path:
    """Draw one or more ROC curves (label -> (fpr, tpr, threshold) points) into ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        for label, pts in curves.items():
            ax.step([p[0] for p in pts], [p[1] for p in pts], where="post", lw=1.4, label=label)
        ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate", ylabel="true positive rate", title=title)
        ax.set_aspect("equal")
        ax.legend(loc="lower right")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_history(histories: Mapping[str, object], path: str | Path, title: str = "training loss") -> Path:
    """Loss and learning rate per epoch for each labelled TrainHistory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(7, 2.8))
        for label, h in histories.items():
            epochs = [e.epoch + 1 for e in h.epochs]
            ax_loss.plot(epochs, [e.loss for e in h.epochs], lw=1.2, label=label)
            ax_lr.plot(epochs, [e.lr for e in h.epochs], lw=1.2, label=label)
        ax_loss.set(xlabel="epoch", ylabel="loss", title=title)
        ax_lr.set(xlabel="epoch", ylabel="learning rate at epoch start")
        if len(histories) > 1:
            ax_loss.legend()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
