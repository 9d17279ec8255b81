"""Figure rendering for the CLI report paths.

Each reporting command writes its delimited output and drops a PNG next to
it: training curves for train/pretrain, ROC and KS curves for eval, and a
grouped bar chart for the ablation table. Matplotlib is imported lazily with
the Agg backend so headless runs just work.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def training_figure(path, metrics):
    """Loss and AUC/KS per epoch, train and validation side by side."""
    plt = _plt()
    fig, (ax_loss, ax_rank) = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "-o"), ("val", "-s")):
        rows = [m for m in metrics if m.split == split]
        if not rows:
            continue
        epochs = [m.epoch for m in rows]
        ax_loss.plot(epochs, [m.loss for m in rows], style, label=f"{split} loss")
        ax_rank.plot(epochs, [m.auc for m in rows], style, label=f"{split} auc")
        ax_rank.plot(epochs, [m.ks for m in rows], style.replace("o", "^"), label=f"{split} ks")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_rank.set_xlabel("epoch")
    ax_rank.set_ylabel("auc / ks")
    ax_rank.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def eval_figure(path, scores, labels):
    """ROC curve plus the TPR/FPR separation sweep behind the KS statistic."""
    from .metrics import roc_points

    plt = _plt()
    fpr, tpr = roc_points(scores, labels)
    fig, (ax_roc, ax_ks) = plt.subplots(1, 2, figsize=(10, 4))
    ax_roc.plot(fpr, tpr, "-")
    ax_roc.plot([0, 1], [0, 1], "--", color="gray")
    ax_roc.set_xlabel("false positive rate")
    ax_roc.set_ylabel("true positive rate")
    ax_roc.set_title("ROC")
    diff = tpr - fpr
    ax_ks.plot(np.linspace(0.0, 1.0, diff.size), diff, "-")
    kpos = int(np.argmax(np.abs(diff)))
    ax_ks.axvline(kpos / max(diff.size - 1, 1), color="gray", linestyle="--")
    ax_ks.set_xlabel("threshold sweep (newest to oldest score)")
    ax_ks.set_ylabel("tpr - fpr")
    ax_ks.set_title(f"KS = {np.abs(diff).max():.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)


def ablation_figure(path, rows):
    """Grouped bars of test AUC and KS per variant; rows are dicts."""
    plt = _plt()
    names = [r["variant"] for r in rows]
    auc_v = [r["auc"] for r in rows]
    ks_v = [r["ks"] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.8 * len(names) + 2, 4))
    ax.bar(x - 0.18, auc_v, width=0.36, label="auc")
    ax.bar(x + 0.18, ks_v, width=0.36, label="ks")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log.info("wrote %s", path)
