import numpy as np
import pytest
import torch

from ie2dnet.config import ModelConfig


@pytest.fixture
def tiny_config():
    return ModelConfig(input_size=16, depth=2, base_channels=2, kernel_size=3, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_images(n, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, size, size, generator=g, dtype=torch.float64).to(dtype)


def random_masks(n, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed + 10_000)
    return (torch.rand(n, 1, size, size, generator=g, dtype=torch.float64) > 0.6).to(dtype)


# (criterion, passed, detail) rows collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
