import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dissolution_uq.awhmc import QuadraticTarget, SamplerConfig, adapt_weights, leapfrog, sample
from dissolution_uq.errors import DegenerateTaskError, DivergenceError, SamplerAbort


def _quad_grad(theta):
    return theta


def test_harmonic_oscillator_stays_on_circle():
    q, p = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    dt = 0.01
    for _ in range(200):
        q, p, _ = leapfrog(q, p, dt, 5, _quad_grad)
        radius = q @ q + p @ p
        assert abs(radius - 2.0) < 5 * dt**2


def test_reversibility():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    prec = a @ a.T + np.eye(4)
    grad = lambda q: prec @ q + np.sin(q)
    q0, p0 = rng.normal(size=4), rng.normal(size=4)
    q1, p1, _ = leapfrog(q0, p0, 0.05, 40, grad)
    q2, p2, _ = leapfrog(q1, -p1, 0.05, 40, grad)
    np.testing.assert_allclose(q2, q0, atol=1e-10)
    np.testing.assert_allclose(-p2, p0, atol=1e-10)


def _energy_error(dt, steps):
    q, p = np.array([1.0, 0.3]), np.array([0.2, -0.5])
    h0 = 0.5 * (q @ q + p @ p)
    errs = []
    for _ in range(steps):
        q, p, _ = leapfrog(q, p, dt, 1, _quad_grad)
        errs.append(abs(0.5 * (q @ q + p @ p) - h0))
    return max(errs)


def test_energy_error_scales_with_dt_squared():
    ratio = _energy_error(0.1, 100) / _energy_error(0.05, 200)
    assert ratio == pytest.approx(4.0, rel=0.2)


def test_leapfrog_jacobian_is_volume_preserving():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    grad = lambda q: a @ q

    def step(z):
        q, p, _ = leapfrog(z[:2], z[2:], 0.2, 1, grad)
        return np.concatenate([q, p])

    z0 = np.array([0.3, -0.2, 0.5, 0.1])
    h = 1e-6
    jac = np.empty((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        jac[:, i] = (step(z0 + e) - step(z0 - e)) / (2 * h)
    assert abs(np.linalg.det(jac) - 1.0) < 1e-10


def test_leapfrog_divergence():
    with pytest.raises(DivergenceError):
        leapfrog(np.ones(2), np.ones(2), 0.1, 3, lambda q: np.full(2, np.nan))


def test_leapfrog_does_not_mutate_inputs():
    q, p = np.ones(3), np.zeros(3)
    leapfrog(q, p, 0.1, 5, _quad_grad)
    assert np.all(q == 1) and np.all(p == 0)


# ---------------------------------------------------------------- weights


def test_weights_closed_form():
    g1 = np.array([2.0, -2.0])  # variance 4
    g2 = np.array([1.0, -1.0])  # variance 1
    np.testing.assert_allclose(adapt_weights([g1, g2]), [0.5, 1.0])
    assert adapt_weights([g1]).tolist() == [1.0]


def test_weights_recomputation(rng):
    g = rng.normal(size=(5, 40)) * rng.uniform(0.1, 10, (5, 1))
    var = np.array([np.mean((row - row.mean()) ** 2) for row in g])
    np.testing.assert_allclose(adapt_weights(g), np.sqrt(var.min() / var), rtol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 30)), elements=st.floats(-1e3, 1e3)))
def test_weight_invariants(g):
    if np.any(g.var(axis=1) <= 1e-12):
        return
    lam = adapt_weights(g)
    assert np.all(lam > 0) and np.all(lam <= 1)
    assert lam[np.argmin(g.var(axis=1))] == 1.0
    perm = np.random.default_rng(0).permutation(g.shape[0])
    np.testing.assert_allclose(adapt_weights(g[perm]), lam[perm])


def test_identical_gradients_give_unit_weights(rng):
    g = rng.normal(size=30)
    assert np.all(adapt_weights([g, g, g]) == 1.0)


def test_degenerate_task_rejected():
    with pytest.raises(DegenerateTaskError):
        adapt_weights([np.array([1.0, -1.0]), np.zeros(2)])


# ---------------------------------------------------------------- sampler


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(10, 5, 10, 0.1)
    with pytest.raises(ValueError):
        SamplerConfig(1, 5, 10, 0.0)


def test_gaussian_target_moments():
    cfg = SamplerConfig(10, 500, 20, 0.1, seed=1)
    rec = sample(QuadraticTarget([np.eye(2)]), cfg, np.array([2.0, -1.0]))
    assert len(rec) == 510
    s = rec.samples
    assert np.all(np.abs(s.mean(axis=0)) < 0.15)
    assert np.all(np.abs(np.cov(s.T) - np.eye(2)) < 0.2)
    assert 0.6 <= rec.acceptance_rate() <= 1.0


def test_same_seed_same_chain():
    target = QuadraticTarget([np.eye(3), 4 * np.eye(3)], [np.zeros(3), np.ones(3)])
    cfg = SamplerConfig(5, 30, 10, 0.05, seed=7)
    start = np.array([1.0, 0.5, -0.3])
    a = sample(target, cfg, start)
    b = sample(target, cfg, start)
    assert np.array_equal(a.thetas, b.thetas) and np.array_equal(a.lambdas, b.lambdas)
    c = sample(target, SamplerConfig(5, 30, 10, 0.05, seed=8), start)
    assert not np.array_equal(a.thetas, c.thetas)


def test_weights_frozen_after_adaptation():
    rng = np.random.default_rng(0)
    target = QuadraticTarget([np.diag(rng.uniform(0.5, 3, 4)), np.diag(rng.uniform(5, 9, 4))], [rng.normal(size=4), rng.normal(size=4)])
    rec = sample(target, SamplerConfig(8, 40, 10, 0.05, seed=2), rng.normal(size=4))
    frozen = rec.lambdas[rec.n_adapt - 1 :]
    assert np.all(frozen == frozen[0])
    assert np.all((rec.lambdas > 0) & (rec.lambdas <= 1))


def test_abort_on_persistent_divergence():
    class Exploding(QuadraticTarget):
        def evaluate(self, theta):
            g, l, p, gp = super().evaluate(theta)
            if np.linalg.norm(theta) > 0.5:
                g = [np.full_like(theta, np.nan)]
            return g, l, p, gp

    target = Exploding([np.eye(2)])
    cfg = SamplerConfig(1, 80, 50, 1.0, seed=0, abort_window=20)
    with pytest.raises(SamplerAbort):
        sample(target, cfg, np.zeros(2))


def test_chain_csv_and_checkpoints(tmp_path):
    cfg = SamplerConfig(2, 6, 5, 0.1, seed=0, checkpoint_every=4)
    rec = sample(QuadraticTarget([np.eye(3)]), cfg, np.zeros(3), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("theta_*.bin")) == ["theta_00004.bin", "theta_00008.bin"]
    rec.write_csv(tmp_path / "chain.csv")
    lines = (tmp_path / "chain.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,H_before,H_after,accept,divergent,lambda0")
    assert len(lines) == 9
