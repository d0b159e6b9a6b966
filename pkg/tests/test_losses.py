import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ie2dnet.errors import DimensionError
from ie2dnet.losses import (
    CE_EPS,
    LOSS_SPECS,
    cross_entropy_loss,
    dice_coefficient,
    dice_loss,
    imitation_loss,
)
from ie2dnet.model import Scope


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` at float64 tensor ``x``."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    return (torch.linalg.norm(a - b) / max(torch.linalg.norm(a), torch.linalg.norm(b), 1e-12)).item()


def analytic_grad(fn, x):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def binary(shape, on):
    m = np.zeros(shape)
    for idx in on:
        m[idx] = 1
    return torch.tensor(m)


def test_dice_examples():
    a = binary((4, 4), [(0, 0), (0, 1), (1, 0), (1, 1)])
    b = binary((4, 4), [(0, 0), (0, 1), (2, 2), (3, 3)])
    disjoint = binary((4, 4), [(3, 0), (3, 1), (3, 2), (3, 3)])
    assert abs(dice_coefficient(a, a).item() - 1.0) <= 1e-6
    assert abs(dice_coefficient(a, disjoint).item()) <= 1e-6
    assert abs(dice_coefficient(a, b).item() - 0.5) <= 1e-6


def test_dice_loss_extremes():
    a = torch.zeros(32, 32)
    a[4:20, 4:20] = 1
    assert dice_loss(a, a).item() == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(a, 1 - a).item() == pytest.approx(1.0, abs=2e-3)


def test_dice_batch_is_mean_of_samples():
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.random((3, 1, 8, 8)))
    t = torch.tensor((rng.random((3, 1, 8, 8)) > 0.5).astype(float))
    each = [dice_coefficient(p[i, 0], t[i, 0]).item() for i in range(3)]
    assert dice_coefficient(p, t).item() == pytest.approx(np.mean(each), rel=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        dice_coefficient(torch.zeros(4, 4), torch.zeros(4, 5))
    with pytest.raises(DimensionError):
        cross_entropy_loss(torch.zeros(4, 4), torch.zeros(5, 4))
    with pytest.raises(DimensionError):
        imitation_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 4, 2, 2))


def test_cross_entropy_examples():
    t = torch.tensor(np.random.default_rng(2).integers(0, 2, (8, 8)), dtype=torch.float64)
    assert abs(cross_entropy_loss(torch.full((8, 8), 0.5, dtype=torch.float64), t).item() - math.log(2)) <= 1e-6
    assert cross_entropy_loss(t, t).item() <= -math.log(1 - CE_EPS) + 1e-12


def test_imitation_examples():
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    assert imitation_loss(z, z).item() == 0.0
    a = torch.zeros(1, 16, dtype=torch.float64)
    b = a.clone()
    b[0, 0], b[0, 1] = 3, 4
    assert abs(imitation_loss(a, b).item() - 5.0) <= 1e-6


def test_imitation_gradient_zero_at_origin():
    z = torch.randn(2, 3, 2, 2, dtype=torch.float64)
    g = analytic_grad(lambda x: imitation_loss(x, z), z)
    assert torch.all(g == 0)


def test_imitation_target_is_detached():
    a = torch.randn(1, 8, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 8, dtype=torch.float64, requires_grad=True)
    imitation_loss(a, b).backward()
    assert b.grad is None and a.grad is not None


def test_imitation_variants():
    a = torch.zeros(1, 4, dtype=torch.float64)
    b = torch.tensor([[3.0, 4.0, 0.0, 0.0]], dtype=torch.float64)
    assert imitation_loss(a, b, squared=True).item() == pytest.approx(25.0)
    assert imitation_loss(a, b, normalize=True).item() == pytest.approx(5.0 / 4)


@pytest.mark.parametrize("seed", range(3))
def test_dice_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    p = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
    t = torch.tensor((rng.random((8, 8)) > 0.5).astype(float))
    fn = lambda x: dice_loss(x, t)
    assert rel_error(analytic_grad(fn, p), central_difference(fn, p.clone())) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    p = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
    t = torch.tensor((rng.random((8, 8)) > 0.5).astype(float))
    fn = lambda x: cross_entropy_loss(x, t)
    assert rel_error(analytic_grad(fn, p), central_difference(fn, p.clone())) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_imitation_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    zi = torch.randn(2, 4, 2, 2, generator=g, dtype=torch.float64)
    zc = torch.randn(2, 4, 2, 2, generator=g, dtype=torch.float64)
    fn = lambda x: imitation_loss(x, zc)
    analytic = analytic_grad(fn, zi)
    assert rel_error(analytic, central_difference(fn, zi.clone())) < 1e-4
    # closed form: mean over the batch of (zi - zc) / ||zi - zc||
    diff = (zi - zc).reshape(2, -1)
    closed = (diff / diff.norm(dim=1, keepdim=True) / 2).reshape(zi.shape)
    assert rel_error(analytic, closed) < 1e-12


def test_scope_mapping_is_declared_data():
    assert LOSS_SPECS["UNET_OUT"].updatable_scopes == {Scope.UNET}
    assert LOSS_SPECS["CAE_OUT"].updatable_scopes == {Scope.CAE_ENCODER, Scope.CAE_DECODER}
    assert LOSS_SPECS["IE2D_OUT"].updatable_scopes == {Scope.IMITATING_ENCODER, Scope.CAE_DECODER}
    assert LOSS_SPECS["IMITATION"].updatable_scopes == {Scope.IMITATING_ENCODER}


prob_maps = arrays(np.float64, (6, 6), elements=st.floats(0, 1))
bin_maps = arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=60, deadline=None)
@given(prob_maps, bin_maps)
def test_dice_bounds_and_loss_nonnegative(p, t):
    p, t = torch.tensor(p), torch.tensor(t)
    d = dice_coefficient(p, t).item()
    assert -1e-12 <= d <= 1 + 1e-12
    assert dice_loss(p, t).item() >= -1e-12
    assert cross_entropy_loss(p, t).item() >= 0


@settings(max_examples=60, deadline=None)
@given(bin_maps, bin_maps)
def test_dice_symmetric(a, b):
    a, b = torch.tensor(a), torch.tensor(b)
    assert dice_coefficient(a, b).item() == pytest.approx(dice_coefficient(b, a).item(), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(bin_maps, bin_maps)
def test_binary_dice_equals_set_dice(a, b):
    inter, total = (a * b).sum(), a.sum() + b.sum()
    if total == 0:
        return
    expected = 2 * inter / total
    assert dice_coefficient(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(expected, abs=1e-6)
