import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oemdeconv import CoreMap, covariance_from_matrix
from oemdeconv.model import CouplingKernel

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# posterior mean of the two_core_instance problem, from oracles.posterior_mean_2core
TWO_CORE_POSTERIOR_MEAN = np.array([0.85418652, 0.49265645])

# filled in by test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def dense_kernel(m):
    return CouplingKernel.from_dense(m)


def dense_cov(m):
    return covariance_from_matrix(np.asarray(m, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_core_instance():
    """Small fixed problem shared by the MCMC and VB oracle tests."""
    from oemdeconv import Hyperparams

    H = np.array([[1.0, 0.4], [0.4, 1.0]])
    Delta = np.array([[1.0, 0.3], [0.3, 1.0]])
    y = np.array([1.5, 0.2])
    hyper = Hyperparams(alpha=3.0, alpha_o=3.0, beta_o=0.5, eta=2.0, nu=2.0)
    return dense_kernel(H), dense_cov(Delta), y, hyper, (H, Delta)


@pytest.fixture
def line_cores():
    return CoreMap(20, 5, [[2.0, 2.0], [5.3, 2.0], [8.6, 2.0]])
