"""
Shared pytest fixtures for the DiG desk tests.
"""
import numpy as np
import pytest

from model import build_model, load_preset


@pytest.fixture
def rng():
    """Seeded generator, fresh per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    """Two blocks, D=8, 16 tokens."""
    return load_preset("toy-xs")


@pytest.fixture
def toy_model(toy_cfg):
    return build_model(toy_cfg, seed=0)


def perturb(model, rng, scale=0.05):
    """Move every parameter off its (partly zero) initialization."""
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    return model
