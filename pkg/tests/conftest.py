from __future__ import annotations

import sys

import numpy as np
import pytest


def kl_perspective(beta, z):
    """Bernoulli KL(z || beta), vectorized over ``z``; independent of the package."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(z > 0, z * np.log(z / beta), 0.0)
        b = np.where(z < 1, (1 - z) * np.log((1 - z) / (1 - beta)), 0.0)
    return a + b


def grid_g(h, beta: float, rho: float, step: float) -> float:
    """Smallest grid point z in [0, beta] with h(beta, z) <= rho."""
    z = np.arange(0.0, beta + step / 2, step)
    ok = h(beta, z) <= rho
    return float(z[np.argmax(ok)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
