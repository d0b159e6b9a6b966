import math

import numpy as np
import pytest
import torch

from conftest import random_images, random_masks
from ie2dnet.config import LOSS_NAMES, ModelConfig, TrainConfig
from ie2dnet.data import SampleBatch, generate_synthetic_volume
from ie2dnet.errors import ConfigError, TrainingAborted
from ie2dnet.losses import LOSS_SPECS
from ie2dnet.model import Scope, init_model
from ie2dnet.trainer import (
    HISTORY_COLUMNS,
    compute_loss,
    fit,
    new_train_state,
    read_history,
    scoped_gradients,
    sub_step,
    train_step,
    write_history,
)

ALL_SCOPES = set(Scope)


def _state(cfg, **kw):
    return new_train_state(init_model(cfg), TrainConfig(**kw))


@pytest.mark.parametrize("loss", LOSS_NAMES)
def test_sub_step_touches_only_declared_scopes(tiny_config, loss):
    state = _state(tiny_config, learning_rate=1e-2)
    before = state.params.clone()
    x, y = random_images(2, 16), random_masks(2, 16)
    sub_step(state, loss, x, y)
    allowed = LOSS_SPECS[loss].updatable_scopes
    outside = ALL_SCOPES - allowed
    assert state.params.equal(before, *outside)
    assert not state.params.equal(before, *allowed)


def test_unet_features_are_blocked(tiny_config):
    state = _state(tiny_config, learning_rate=1e-2)
    before = state.params.clone()
    x, y = random_images(2, 16), random_masks(2, 16)
    for loss in ("CAE_OUT", "IE2D_OUT"):
        _, grads = scoped_gradients(state.params, loss, x, y, state.config)
        assert not any(state.params.scopes[k] == Scope.UNET for k in grads)
        sub_step(state, loss, x, y)
    assert state.params.equal(before, Scope.UNET)


def test_imitation_target_detached(tiny_config):
    state = _state(tiny_config, learning_rate=1e-2)
    before = state.params.clone()
    sub_step(state, "IMITATION", random_images(2, 16), random_masks(2, 16))
    assert state.params.equal(before, Scope.CAE_ENCODER, Scope.CAE_DECODER, Scope.UNET)


def test_train_step_order_and_running_stats(tiny_config):
    state = _state(tiny_config)
    train_step(state, (random_images(2, 16)[:, 0].numpy(), random_masks(2, 16)[:, 0].numpy()))
    assert all(len(state.running[n]) == 1 for n in LOSS_NAMES)
    assert state.steps == 1


def _fd_gradient(params, loss, x, y, tc, names, h=1e-6):
    out = {}
    with torch.no_grad():
        for name in names:
            t = params[name]
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = compute_loss(params, loss, x, y, tc).item()
                flat[i] = orig - h
                down = compute_loss(params, loss, x, y, tc).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out[name] = g
    return out


def _rel(a, b):
    va = torch.cat([v.reshape(-1) for v in a])
    vb = torch.cat([v.reshape(-1) for v in b])
    return (torch.linalg.norm(va - vb) / max(torch.linalg.norm(va), torch.linalg.norm(vb), 1e-12)).item()


def random_tiny_model(seed):
    """Tiny float64 model with jittered weights and non-zero biases.

    Freshly initialized biases are exactly zero, which parks some ReLU inputs
    on the kink where one-sided derivatives differ.
    """
    cfg = ModelConfig(input_size=8, depth=1, base_channels=2, kernel_size=3, seed=seed)
    params = init_model(cfg, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    for name in params:
        params.tensors[name] = params[name] + 0.1 * torch.randn(params[name].shape, generator=g, dtype=torch.float64)
    return params


def gradient_errors(seed, loss_kind="dice"):
    params = random_tiny_model(seed)
    tc = TrainConfig(loss_kind=loss_kind)
    x = random_images(2, 8, seed=seed, dtype=torch.float64)
    y = random_masks(2, 8, seed=seed, dtype=torch.float64)
    errors = {}
    for loss in LOSS_NAMES:
        _, grads = scoped_gradients(params, loss, x, y, tc)
        params.requires_grad_(False)
        names = list(grads)
        fd = _fd_gradient(params, loss, x, y, tc, names)
        errors[loss] = _rel([grads[n] for n in names], [fd[n] for n in names])
    return errors


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    for loss, err in gradient_errors(seed).items():
        assert err < 1e-3, (loss, err)


def test_cross_entropy_gradients_match_finite_differences():
    for loss, err in gradient_errors(5, "cross-entropy").items():
        assert err < 1e-3, (loss, err)


def test_descent_sanity():
    """Small plain-SGD steps on a fixed batch do not increase the loss being minimized."""
    cfg = ModelConfig(input_size=8, depth=1, base_channels=2, kernel_size=3)
    tc = TrainConfig(optimizer="sgd", learning_rate=1e-4)
    ok = total = 0
    for trial in range(25):
        params = init_model(ModelConfig(**{**cfg.to_dict(), "seed": trial}), dtype=torch.float64)
        state = new_train_state(params, tc)
        x = random_images(2, 8, seed=trial, dtype=torch.float64)
        y = random_masks(2, 8, seed=trial, dtype=torch.float64)
        for loss in LOSS_NAMES:
            with torch.no_grad():
                before = compute_loss(state.params, loss, x, y, tc).item()
            sub_step(state, loss, x, y)
            with torch.no_grad():
                after = compute_loss(state.params, loss, x, y, tc).item()
            ok += after <= before
            total += 1
    assert ok / total >= 0.95


def test_nonfinite_loss_aborts(tiny_config):
    state = _state(tiny_config)
    x = random_images(1, 16)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingAborted) as info:
        sub_step(state, "UNET_OUT", x, random_masks(1, 16))
    assert info.value.loss_name == "UNET_OUT"


def _corpus(n=6, size=16, seed=0, vid="V"):
    vol = generate_synthetic_volume(seed, n, size)
    return SampleBatch(vol.images, vol.masks, [vid] * n, np.arange(n))


def test_fit_history_structure(tiny_config, tmp_path):
    tc = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3)
    state, history = fit(_corpus(seed=1), _corpus(3, seed=2, vid="W"), tiny_config, tc)
    assert len(history) == 3
    for rec in history:
        vals = [getattr(rec, c) for c in HISTORY_COLUMNS[1:]]
        assert len(vals) == 6 and all(math.isfinite(v) for v in vals)
    assert state.best_val_dsc == max(r.val_dsc_ie2d for r in history)
    assert history[state.best_epoch - 1].val_dsc_ie2d == state.best_val_dsc
    path = write_history(history, tmp_path / "h.csv")
    lines = path.read_text().splitlines()
    assert all(len(line.split(",")) == 7 for line in lines)
    assert read_history(path) == history


def test_fit_deterministic(tiny_config, tmp_path):
    tc = TrainConfig(epochs=2, batch_size=3, learning_rate=1e-3, seed=4)
    _, h1 = fit(_corpus(seed=1), _corpus(3, seed=2, vid="W"), tiny_config, tc)
    _, h2 = fit(_corpus(seed=1), _corpus(3, seed=2, vid="W"), tiny_config, tc)
    write_history(h1, tmp_path / "a.csv")
    write_history(h2, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_fit_epoch_alternation(tiny_config):
    tc = TrainConfig(epochs=1, batch_size=3, learning_rate=1e-3, alternation="epoch")
    state, history = fit(_corpus(seed=1), None, tiny_config, tc)
    assert len(history) == 1 and math.isnan(history[0].val_dsc_ie2d)
    assert all(len(state.running[n]) == 2 for n in LOSS_NAMES)
    assert state.best_params is not None


def test_fit_rejects_empty(tiny_config):
    empty = _corpus().subset([])
    with pytest.raises(ConfigError):
        fit(empty, None, tiny_config, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(step_order=("UNET_OUT", "UNET_OUT", "CAE_OUT", "IMITATION"))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
