import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dissolution_uq.dns import ModelConstants, emit_synthetic_uct, make_geometry_1d, solve_dissolution
from dissolution_uq.estimator import DissolutionInverter

TINY = dict(n_obs=800, task_sigma=0.05, n_samples=4, n_leapfrog=5, n_adapt=(2, 2, 2), hidden_eps=2, hidden_conc=2, width=8)


@pytest.fixture(scope="module")
def stack():
    eps, _ = solve_dissolution(make_geometry_1d(nx=60, nt=40), ModelConstants(21.3912, 2.4))
    return emit_synthetic_uct(eps, 0.03, seed=0)


@pytest.fixture(scope="module")
def fitted(stack):
    return DissolutionInverter(**TINY).fit(stack)


def test_params_and_clone():
    est = DissolutionInverter(width=8, seed=4)
    params = est.get_params()
    assert params["width"] == 8 and params["seed"] == 4
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(beta=0.5)
    assert est.beta == 0.5


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        DissolutionInverter().predict(np.zeros((3, 2)))


def test_fit_rejects_arrays():
    with pytest.raises(TypeError):
        DissolutionInverter(**TINY).fit(np.zeros((40, 60)))


def test_predict_shapes_and_range(fitted, stack):
    pts = stack.points()[:50]
    mean, std = fitted.predict(pts, return_std=True)
    assert mean.shape == (50,) and std.shape == (50,)
    assert np.all((mean >= 0) & (mean <= 1)) and np.all(std >= 0)
    assert fitted.predict_concentration(pts).shape == (50,)
    lo, hi = fitted.da2_interval()
    assert 0 < lo < hi


def test_predict_checks_width(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((4, 3)))


def test_step1_only_has_no_damkohler(stack):
    est = DissolutionInverter(**TINY, steps=(1,)).fit(stack)
    with pytest.raises(ValueError):
        est.da2_interval()
    with pytest.raises(ValueError):
        est.predict_concentration(stack.points()[:5])
