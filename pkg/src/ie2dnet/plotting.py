"""Figures written next to the CSV outputs: per-volume Dice bars and training curves."""
from __future__ import annotations

import numpy as np
from matplotlib.figure import Figure

COLORS = {"dsc_unet": "#d62728", "dsc_ie2d": "#1f77b4", "dsc": "#1f77b4"}
LABELS = {"dsc_unet": "U-Net", "dsc_ie2d": "IE2D-Net", "dsc": "DSC"}

params = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _figure(width=5.0, height=None):
    golden = (np.sqrt(5) - 1.0) / 2.0
    fig = Figure(figsize=(width, height or width * golden), dpi=150)
    return fig


def _apply_rc(ax):
    for label in ax.get_xticklabels() + ax.get_yticklabels():
        label.set_fontsize(params["xtick.labelsize"])
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)


def plot_report(report, path):
    """Grouped bar chart of the per-volume Dice scores in ``report``."""
    vids = list(report.per_volume)
    scores = np.array([report.per_volume[v] for v in vids]) * 100
    fig = _figure()
    ax = fig.add_subplot(111)
    n = len(report.columns)
    width = 0.8 / n
    x = np.arange(len(vids))
    for j, col in enumerate(report.columns):
        mean, std = report.aggregate()[j]
        ax.bar(x + (j - (n - 1) / 2) * width, scores[:, j], width,
               color=COLORS.get(col, None), label=f"{LABELS.get(col, col)} ({mean:.2f} ± {std:.2f})")
    ax.set_xticks(x)
    ax.set_xticklabels(vids, rotation=45 if len(vids) > 8 else 0)
    ax.set_ylabel("DSC (%)", fontsize=params["axes.labelsize"])
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right", fontsize=params["legend.fontsize"])
    _apply_rc(ax)
    fig.tight_layout()
    fig.savefig(path)
    return path


def plot_history(history, path, title=None):
    """Four training losses (left) and both validation Dice curves (right) per epoch."""
    epochs = [h.epoch for h in history]
    fig = _figure(width=8.0, height=3.0)
    ax_loss, ax_dsc = fig.add_subplot(121), fig.add_subplot(122)
    for attr, label in (("loss_unet", "U-Net out"), ("loss_cae", "CAE out"),
                        ("loss_ie2d", "IE2D out"), ("loss_imit", "imitation")):
        vals = np.array([getattr(h, attr) for h in history], dtype=float)
        ax_loss.plot(epochs, vals, label=label)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend(fontsize=params["legend.fontsize"])
    ax_dsc.plot(epochs, [h.val_dsc_unet for h in history], color=COLORS["dsc_unet"], label="U-Net")
    ax_dsc.plot(epochs, [h.val_dsc_ie2d for h in history], color=COLORS["dsc_ie2d"], label="IE2D-Net")
    ax_dsc.set_xlabel("epoch")
    ax_dsc.set_ylabel("validation DSC")
    ax_dsc.set_ylim(0, 1)
    ax_dsc.legend(fontsize=params["legend.fontsize"])
    for ax in (ax_loss, ax_dsc):
        _apply_rc(ax)
    if title:
        fig.suptitle(title, fontsize=params["font.size"])
    fig.tight_layout()
    fig.savefig(path)
    return path
