"""Segmentation losses, the Dice metric and the latent imitation loss.

Each of the four training losses is described by a :class:`LossSpec` whose
``updatable_scopes`` is the only thing the trainer consults when deciding
which parameters a sub-step may touch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError
from .model import Scope

# Smoothing for the training loss keeps empty masks and early gradients sane.
DICE_LOSS_SMOOTH = 1.0
# The reported metric must match set-based Dice, so its smoothing is negligible.
DICE_METRIC_SMOOTH = 1e-6
CE_EPS = 1e-7


@dataclass(frozen=True)
class LossSpec:
    name: str
    updatable_scopes: frozenset


LOSS_SPECS = {
    "UNET_OUT": LossSpec("UNET_OUT", frozenset({Scope.UNET})),
    "CAE_OUT": LossSpec("CAE_OUT", frozenset({Scope.CAE_ENCODER, Scope.CAE_DECODER})),
    "IE2D_OUT": LossSpec("IE2D_OUT", frozenset({Scope.IMITATING_ENCODER, Scope.CAE_DECODER})),
    "IMITATION": LossSpec("IMITATION", frozenset({Scope.IMITATING_ENCODER})),
}


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample(x):
    # a lone map is one sample; otherwise the leading axis is the batch
    return x.reshape(1, -1) if x.ndim <= 2 else x.reshape(x.shape[0], -1)


def dice_coefficient(pred, target, smooth=DICE_METRIC_SMOOTH):
    """Soft Dice ``(2*sum(p*t) + s) / (sum(p) + sum(t) + s)``.

    Batched inputs (ndim > 2) are scored per sample and averaged.
    """
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_same_shape(pred, target)
    target = target.to(pred.dtype)
    p, t = _per_sample(pred), _per_sample(target)
    inter = (p * t).sum(dim=1)
    dsc = (2 * inter + smooth) / (p.sum(dim=1) + t.sum(dim=1) + smooth)
    return dsc.mean()


def dice_loss(pred, target, smooth=DICE_LOSS_SMOOTH):
    return 1 - dice_coefficient(pred, target, smooth)


def cross_entropy_loss(pred, target, eps=CE_EPS):
    """Mean pixelwise binary cross entropy with ``pred`` clamped to ``[eps, 1-eps]``."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_same_shape(pred, target)
    target = target.to(pred.dtype)
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def imitation_loss(z_imit, z_cae, squared=False, normalize=False):
    """Euclidean distance between flattened latent codes, averaged over the batch.

    ``z_cae`` is detached, so no gradient reaches whatever produced it. The
    gradient at zero distance is defined as zero. ``squared`` drops the
    square root; ``normalize`` divides by the latent dimensionality.
    """
    _check_same_shape(z_imit, z_cae)
    diff = _per_sample(z_imit) - _per_sample(z_cae.detach())
    sq = (diff * diff).sum(dim=1)
    if squared:
        dist = sq
    else:
        # sqrt has an infinite derivative at 0; route the origin through a constant
        nonzero = sq > 0
        dist = torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    if normalize:
        dist = dist / diff.shape[1]
    return dist.mean()


def segmentation_loss(kind):
    """The loss used for the three segmentation outputs: ``dice`` or ``cross-entropy``."""
    if kind == "dice":
        return dice_loss
    if kind == "cross-entropy":
        return cross_entropy_loss
    raise ValueError(f"unknown loss kind {kind!r}")
