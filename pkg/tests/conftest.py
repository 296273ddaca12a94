"""Shared fixtures: small deterministic datasets and training configs."""

import numpy as np
import pytest

from lcr2s.data import SyntheticConfig, generate_synthetic
from lcr2s.training import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_ds():
    """8 identities x 2 views: smallest dataset with exclude_self support."""
    return generate_synthetic(SyntheticConfig(
        n_identities=8, views_per_identity=2, latent_dim=4, input_dim=6,
        seed=0))


@pytest.fixture
def tiny_cfg():
    """Training config sized for tiny_ds: short, small, deterministic."""
    return TrainConfig(epochs=2, P=4, K=2, K_t=1, K_v=1, d1=4, d=8, H=2,
                       warmup_epochs=1, decay_epochs=(1,), seed=0,
                       steps_per_epoch=2)
