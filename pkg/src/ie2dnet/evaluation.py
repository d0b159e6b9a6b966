"""Dice evaluation, the per-volume CSV report and color overlays."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionError
from .model import ie2d_infer

THRESHOLD = 0.5
GREEN = (0, 255, 0)
RED = (255, 0, 0)
BLUE = (0, 0, 255)
GUTTER = 4


def binary_dice(pred, target):
    """Set-based Dice ``2|A&B| / (|A|+|B|)``; two empty masks score 1."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def pooled_dice(preds, targets):
    """Dice over all pixels of a stack at once."""
    return binary_dice(np.asarray(preds), np.asarray(targets))


def predict_volume(params, images, batch_size=16):
    """Binarized ``(ie2d, unet)`` predictions for an image stack, each ``(N, H, W)`` uint8."""
    ie2d, unet = [], []
    for start in range(0, len(images), batch_size):
        chunk = torch.as_tensor(np.asarray(images[start:start + batch_size], dtype=np.float32))
        seg_ie2d, seg_unet = ie2d_infer(params, chunk)
        ie2d.append((seg_ie2d[:, 0] >= THRESHOLD).to(torch.uint8).numpy())
        unet.append((seg_unet[:, 0] >= THRESHOLD).to(torch.uint8).numpy())
    return np.concatenate(ie2d), np.concatenate(unet)


def evaluate_volume(params, volume, pooled=False, batch_size=16):
    """Mean slice Dice ``(dsc_unet, dsc_ie2d)`` of both heads on one volume.

    With ``pooled=True`` the Dice is computed over all voxels of the volume
    instead of averaging per-slice scores.
    """
    if len(volume) == 0:
        raise ValueError("cannot evaluate an empty volume")
    ie2d, unet = predict_volume(params, volume.images, batch_size)
    if pooled:
        return pooled_dice(unet, volume.masks), pooled_dice(ie2d, volume.masks)
    dsc_unet = np.mean([binary_dice(p, t) for p, t in zip(unet, volume.masks)])
    dsc_ie2d = np.mean([binary_dice(p, t) for p, t in zip(ie2d, volume.masks)])
    return float(dsc_unet), float(dsc_ie2d)


# -- report ----------------------------------------------------------------------

def _pct(value):
    return round(100.0 * value, 2)


@dataclass
class EvalReport:
    """Per-volume Dice scores for one or more models.

    Aggregates are computed from the percentages as printed, so a reader can
    recompute them from the CSV rows exactly.
    """

    columns: tuple = ("dsc_unet", "dsc_ie2d")
    per_volume: dict = field(default_factory=dict)  # volume_id -> tuple of DSC in [0, 1]

    def add(self, volume_id, *scores):
        if len(scores) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} scores, got {len(scores)}")
        self.per_volume[volume_id] = tuple(float(s) for s in scores)

    def aggregate(self):
        """``[(mean, population_std), ...]`` in percent, one pair per column."""
        out = []
        for j in range(len(self.columns)):
            vals = np.array([_pct(s[j]) for s in self.per_volume.values()])
            out.append((float(vals.mean()), float(vals.std(ddof=0))))
        return out


def emit_report(report, path):
    """Write ``report`` as CSV: header, one row per volume (x100, 2 decimals), ``mean`` row."""
    if not report.per_volume:
        raise ValueError("report has no rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume", *report.columns])
        for vid, scores in report.per_volume.items():
            writer.writerow([vid, *(f"{_pct(s):.2f}" for s in scores)])
        writer.writerow(["mean", *(f"{m:.2f} ± {s:.2f}" for m, s in report.aggregate())])
    return path


def read_report(path):
    """Parse a report back into ``(columns, rows, aggregate)``; values in percent."""
    with open(path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    columns = tuple(table[0][1:])
    rows = {r[0]: tuple(float(v) for v in r[1:]) for r in table[1:-1]}
    aggregate = []
    for cell in table[-1][1:]:
        mean, std = cell.split("±")
        aggregate.append((float(mean), float(std)))
    return columns, rows, aggregate


# -- overlays ---------------------------------------------------------------------

def _gray_rgb(image):
    img = np.asarray(image, dtype=np.float64)
    return np.repeat(np.clip(img, 0, 1)[..., None] * 255.0, 3, axis=2)


def tint(image, mask, color, alpha=0.5):
    """Grayscale ``image`` as RGB uint8 with ``mask`` blended toward ``color``."""
    rgb = _gray_rgb(image)
    m = np.asarray(mask).astype(bool)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.round(rgb).astype(np.uint8)


def render_overlay(image, ground_truth, unet_pred, ie2d_pred, alpha=0.5, gutter=GUTTER):
    """Side-by-side panels: input, ground truth (green), U-Net (red), IE2D (blue).

    ``ground_truth`` may be None, in which case its panel is left out. Panels
    are separated by white ``gutter``-pixel columns.
    """
    image = np.asarray(image)
    maps = [m for m in (ground_truth, unet_pred, ie2d_pred) if m is not None]
    for m in maps:
        if np.asarray(m).shape != image.shape:
            raise DimensionError(f"overlay map {np.asarray(m).shape} does not match image {image.shape}")
    panels = [np.round(_gray_rgb(image)).astype(np.uint8)]
    if ground_truth is not None:
        panels.append(tint(image, ground_truth, GREEN, alpha))
    panels.append(tint(image, unet_pred, RED, alpha))
    panels.append(tint(image, ie2d_pred, BLUE, alpha))
    spacer = np.full((image.shape[0], gutter, 3), 255, dtype=np.uint8)
    pieces = []
    for i, p in enumerate(panels):
        if i:
            pieces.append(spacer)
        pieces.append(p)
    return np.concatenate(pieces, axis=1)


def summarize(values):
    """Mean and population std of a sequence; ``(nan, nan)`` when empty."""
    vals = list(values)
    if not vals:
        return math.nan, math.nan
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=0))
