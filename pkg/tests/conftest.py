import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, h=1e-4):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_addoption(parser):
    parser.addoption("--full-profile", action="store_true", default=False, help="run hours-scale end-to-end checks with full-length chains")
