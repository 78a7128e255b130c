import logging

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _quiet_embedding_warnings():
    # covariance clipping warnings are expected in a few tests; keep the
    # output readable
    logger = logging.getLogger("gkhyper.covariance")
    level = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(fn, theta_values, step_rel=1e-6):
    """Central finite differences of a scalar function of theta."""
    theta_values = np.asarray(theta_values, dtype=float)
    grad = np.zeros_like(theta_values)
    for i in range(theta_values.size):
        h = step_rel * theta_values[i]
        tp = theta_values.copy()
        tp[i] += h
        tm = theta_values.copy()
        tm[i] -= h
        grad[i] = (fn(tp) - fn(tm)) / (2.0 * h)
    return grad
