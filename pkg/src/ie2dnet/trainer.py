"""Successive, scope-restricted optimization of the four losses.

Every sub-step builds a fresh forward graph, differentiates its loss with
respect to the parameters of the loss's declared scopes only, and hands those
gradients to an optimizer that owns exactly those parameters. Each loss has
its own optimizer (and so its own moment estimates), which matters for the
CAE decoder: it is updated by both CAE_OUT and IE2D_OUT.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import LOSS_NAMES, ModelConfig, TrainConfig
from .data import SampleBatch, augment
from .errors import ConfigError, TrainingAborted
from .evaluation import evaluate_volume
from .losses import LOSS_SPECS, imitation_loss, segmentation_loss
from .model import ParameterStore, cae_encode, decode_with_skips, imitating_encode, init_model, unet_forward

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_unet", "loss_cae", "loss_ie2d", "loss_imit", "val_dsc_unet", "val_dsc_ie2d")
_HISTORY_LOSS = {"UNET_OUT": "loss_unet", "CAE_OUT": "loss_cae", "IE2D_OUT": "loss_ie2d", "IMITATION": "loss_imit"}


def compute_loss(params, name, images, masks, train_config):
    """Scalar value of loss ``name`` on a batch; images and masks are ``(N, 1, H, W)``."""
    seg_loss = segmentation_loss(train_config.loss_kind)
    if name == "UNET_OUT":
        seg, _ = unet_forward(params, images)
        return seg_loss(seg, masks)
    if name == "IMITATION":
        with torch.no_grad():
            target = cae_encode(params, masks)
        return imitation_loss(
            imitating_encode(params, images), target,
            squared=train_config.imitation_squared, normalize=train_config.imitation_normalize,
        )
    with torch.no_grad():
        _, skips = unet_forward(params, images)
    if name == "CAE_OUT":
        code = cae_encode(params, masks)
    elif name == "IE2D_OUT":
        code = imitating_encode(params, images)
    else:
        raise ValueError(f"unknown loss {name!r}")
    return seg_loss(decode_with_skips(params, code, skips), masks)


def scoped_gradients(params, name, images, masks, train_config):
    """``(loss, {param_name: grad})`` for the parameters loss ``name`` may update."""
    names = params.names(*LOSS_SPECS[name].updatable_scopes)
    tensors = [params[k] for k in names]
    for t in tensors:
        t.requires_grad_(True)
    loss = compute_loss(params, name, images, masks, train_config)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return loss, {k: (torch.zeros_like(t) if g is None else g) for k, t, g in zip(names, tensors, grads)}


def _make_optimizer(tensors, train_config):
    if train_config.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=train_config.learning_rate)
    return torch.optim.SGD(tensors, lr=train_config.learning_rate)


@dataclass
class TrainState:
    params: ParameterStore
    config: TrainConfig
    optimizers: dict
    epoch: int = 0
    steps: int = 0
    running: dict = field(default_factory=lambda: {n: [] for n in LOSS_NAMES})
    best_val_dsc: float = -math.inf
    best_epoch: int | None = None
    best_params: ParameterStore | None = None

    def running_means(self):
        return {n: (float(np.mean(v)) if v else math.nan) for n, v in self.running.items()}

    def reset_running(self):
        self.running = {n: [] for n in LOSS_NAMES}


def new_train_state(params, train_config):
    """Fresh state with one optimizer per loss over that loss's scoped parameters."""
    optimizers = {}
    for name, spec in LOSS_SPECS.items():
        tensors = [params[k] for k in params.names(*spec.updatable_scopes)]
        optimizers[name] = _make_optimizer(tensors, train_config)
    return TrainState(params, train_config, optimizers)


def _as_tensors(batch, dtype):
    if isinstance(batch, SampleBatch):
        images, masks = batch.images, batch.masks
    else:
        images, masks = batch
    images = torch.as_tensor(np.asarray(images, dtype=np.float32) if not torch.is_tensor(images) else images)
    masks = torch.as_tensor(np.asarray(masks, dtype=np.float32) if not torch.is_tensor(masks) else masks)
    if images.ndim == 3:
        images, masks = images[:, None], masks[:, None]
    return images.to(dtype), masks.to(dtype)


def sub_step(state, name, images, masks):
    """Minimize loss ``name`` for one step; returns the pre-update loss value."""
    loss, grads = scoped_gradients(state.params, name, images, masks, state.config)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingAborted(name, f"non-finite loss {value}")
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingAborted(name, f"non-finite gradient for {k}")
    opt = state.optimizers[name]
    for k, g in grads.items():
        state.params[k].grad = g
    opt.step()
    for k in grads:
        state.params[k].grad = None
    state.running[name].append(value)
    return value


def train_step(state, batch):
    """Run the four scoped sub-steps on ``batch`` in ``state.config.step_order``."""
    images, masks = _as_tensors(batch, state.params.dtype)
    for name in state.config.step_order:
        sub_step(state, name, images, masks)
    state.steps += 1
    return state


def iter_batches(train_set, train_config, rng, augmented=True):
    """Shuffled, augmented ``(images, masks)`` mini-batches for one epoch."""
    order = rng.permutation(len(train_set))
    for start in range(0, len(order), train_config.batch_size):
        idx = order[start:start + train_config.batch_size]
        images, masks = [], []
        for i in idx:
            pair = (train_set.images[i], train_set.masks[i])
            if augmented:
                pair = augment(pair, rng, train_config.aug_rotation_deg, train_config.aug_translate_frac)
            images.append(pair[0])
            masks.append(pair[1])
        yield np.stack(images), np.stack(masks)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_unet: float
    loss_cae: float
    loss_ie2d: float
    loss_imit: float
    val_dsc_unet: float
    val_dsc_ie2d: float

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, c))) for c in HISTORY_COLUMNS[1:]]


def fit(train_set, val_set, model_config, train_config, params=None, on_epoch=None):
    """Train all four losses for ``train_config.epochs`` epochs.

    After every epoch both heads are scored on ``val_set`` (unaugmented) and
    the parameters with the best IE2D validation Dice are kept in
    ``state.best_params``. Returns ``(state, history)``.
    """
    if train_set is None or len(train_set) == 0:
        raise ConfigError("training set is empty")
    if isinstance(train_set, (list, tuple)):
        train_set = SampleBatch.concat(train_set)
    if isinstance(val_set, (list, tuple)):
        val_set = SampleBatch.concat(val_set) if val_set else None
    if params is None:
        params = init_model(model_config)
    state = new_train_state(params, train_config)
    rng = np.random.default_rng(train_config.seed)
    history = []
    for epoch in range(1, train_config.epochs + 1):
        state.reset_running()
        batches = list(iter_batches(train_set, train_config, rng))
        if train_config.alternation == "batch":
            for batch in batches:
                train_step(state, batch)
        else:
            tensors = [_as_tensors(b, params.dtype) for b in batches]
            for name in train_config.step_order:
                for images, masks in tensors:
                    sub_step(state, name, images, masks)
            state.steps += len(batches)
        state.epoch = epoch

        if val_set is not None and len(val_set):
            dsc_unet, dsc_ie2d = evaluate_volume(params, val_set)
        else:
            dsc_unet = dsc_ie2d = math.nan
        means = state.running_means()
        record = EpochRecord(epoch, *(means[n] for n in LOSS_NAMES), dsc_unet, dsc_ie2d)
        history.append(record)
        # with no validation data the latest parameters are the best we know
        if math.isnan(dsc_ie2d) or dsc_ie2d > state.best_val_dsc:
            state.best_val_dsc = dsc_ie2d
            state.best_epoch = epoch
            state.best_params = params.clone()
        logger.info(
            "epoch %d  losses unet %.4f cae %.4f ie2d %.4f imit %.4g  val dsc unet %.4f ie2d %.4f",
            epoch, *(means[n] for n in LOSS_NAMES), dsc_unet, dsc_ie2d,
        )
        if on_epoch is not None:
            on_epoch(state, record)
    return state, history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in history:
            writer.writerow(rec.row())
    return path


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]
