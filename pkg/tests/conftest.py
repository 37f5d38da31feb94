"""Shared fixtures: the default pipeline configuration and its model."""
import os

import numpy as np
import pytest

from reachtraj.cli import constraint_set
from reachtraj.config import load_config

CONFIG_PATH = os.path.join(os.path.dirname(__file__), os.pardir,
                           "configs", "default.yaml")


@pytest.fixture(scope="session")
def cfg():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def model(cfg):
    return cfg.model


@pytest.fixture(scope="session")
def cs(cfg):
    return constraint_set(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_states(model, rng, n, scale_q=0.3, scale_qd=0.5, base=None):
    """States perturbed around a nominal pose, clear of singularities."""
    x0 = np.zeros(model.n_x) if base is None else np.asarray(base, float)
    out = np.tile(x0, (n, 1))
    out[:, : model.n_q] += scale_q * rng.standard_normal((n, model.n_q))
    out[:, model.n_q:] += scale_qd * rng.standard_normal((n, model.n_q))
    return out
