import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from dissolution_uq.autodiff import DualBatch
from dissolution_uq.dns import ModelConstants, make_geometry_1d, solve_dissolution
from dissolution_uq.errors import NonFiniteResidualError
from dissolution_uq.imaging import ObservationSet, Region
from dissolution_uq.potentials import (
    FieldNet,
    TaskKind,
    assemble_potential,
    benchmark_operators,
    build_potential,
    diffusion_compact,
    diffusion_developed,
    diffusion_developed_beta1,
    grad_potential,
    residual_c_field,
    residual_dirichlet,
    residual_eps_fit,
    residual_f1,
    residual_f2,
    task_losses,
    write_benchmark_csv,
)
from dissolution_uq.surrogate import NetworkSpec, ParamLayout, default_specs, init_params, log_prior, predict_conc, predict_eps

from conftest import central_diff


def _layout(step, dim=2, width=8):
    return ParamLayout(NetworkSpec(dim, 2, width), NetworkSpec(dim, 2, width, "linear"), step)


def _theta(layout, seed=0, log_alpha=0.3, log_gamma=-0.4):
    th = init_params(layout, seed)
    if layout.alpha_index is not None:
        th[layout.alpha_index] = log_alpha
    if layout.gamma_index is not None:
        th[layout.gamma_index] = log_gamma
    return th


def _constant_nets(layout, eps_bias=0.0, conc_bias=0.0):
    """All weights zero: eps = (tanh(b) + 1) / 2 and C = b exactly."""
    th = np.zeros(layout.size)
    th[layout.eps_slice.stop - 1] = eps_bias
    if layout.has_conc:
        th[layout.conc_slice.stop - 1] = conc_bias
    return th


def _points(n, dim=2, seed=0):
    return np.random.default_rng(seed).uniform(0.1, 0.9, (n, dim))


# ---------------------------------------------------------------- residuals


def test_eps_fit_constant_offset():
    lay = _layout(1)
    th = _constant_nets(lay)  # eps = 0.5 everywhere
    pts = _points(20)
    assert residual_eps_fit(lay, th, pts, np.full(20, 0.5)) == pytest.approx(0.0, abs=1e-15)
    assert residual_eps_fit(lay, th, pts, np.zeros(20)) == pytest.approx(0.5)


def test_eps_fit_matches_loop():
    lay = _layout(1)
    th = _theta(lay, 3)
    pts = _points(50)
    im = np.random.default_rng(1).random(50)
    acc = 0.0
    for p, v in zip(pts, im):
        e = predict_eps(lay, th, p[None, :]).value[0]
        acc += (1 - e - v) ** 2
    assert residual_eps_fit(lay, th, pts, im) == pytest.approx(np.sqrt(acc / 50), rel=1e-13)


def test_f1_manufactured_zero_and_degenerate_alpha():
    lay = _layout(2)
    pts = _points(30)
    th = _constant_nets(lay, 0.3, 0.0)  # eps_t = 0 and C = 0
    assert residual_f1(lay, th, pts) == 0.0
    th = _theta(lay, 2)
    th[lay.alpha_index] = -np.inf  # alpha = 0
    c = predict_conc(lay, th, pts).value
    assert residual_f1(lay, th, pts) == pytest.approx(np.sqrt(np.mean(c**2)), rel=1e-14)


def test_f1_time_derivative_against_fd():
    lay = _layout(2)
    th = _theta(lay, 4)
    pts = _points(25)
    h = 1e-5
    shift = np.zeros(2)
    shift[1] = h
    et = (predict_eps(lay, th, pts + shift).value - predict_eps(lay, th, pts - shift).value) / (2 * h)
    c = predict_conc(lay, th, pts).value
    ref = np.sqrt(np.mean((np.exp(0.3) / 0.7 * et - c) ** 2))
    assert residual_f1(lay, th, pts, upsilon_C0=0.7) == pytest.approx(ref, abs=1e-5)


def test_poisson_residual_vanishes_for_affine_concentration():
    lay = ParamLayout(NetworkSpec(2, 1, 4), NetworkSpec(2, 1, 4, "linear"), 2)
    th = _theta(lay, 0)
    # a single tanh layer kept in its linear regime is not affine, so build an
    # affine C by zeroing the hidden layer and using only the output bias
    th[lay.conc_slice] = 0.0
    th[lay.conc_slice.stop - 1] = 0.7
    assert residual_c_field(lay, th, _points(10), 2) == 0.0


def test_heat_residual_manufactured():
    # eps-free check of gamma C_t - C_xx with C = b * tanh(w t) in 1D: C_xx = 0
    lay = ParamLayout(NetworkSpec(2, 1, 1), NetworkSpec(2, 1, 1, "linear"), 3)
    th = np.zeros(lay.size)
    conc = th[lay.conc_slice]
    conc[:] = [0.0, 0.8, 0.0, 1.5, 0.0]  # W1 = (0, 0.8), b1 = 0, W2 = 1.5, b2 = 0
    th[lay.conc_slice] = conc
    th[lay.gamma_index] = np.log(0.25)
    pts = _points(15)
    ct = 1.5 * 0.8 / np.cosh(0.8 * pts[:, 1]) ** 2
    assert residual_c_field(lay, th, pts, 3) == pytest.approx(np.sqrt(np.mean((0.25 * ct) ** 2)), rel=1e-13)


def test_laplacian_against_fd():
    lay = _layout(2)
    th = _theta(lay, 5)
    pts = _points(20)
    h = 1e-4
    e = np.array([h, 0.0])
    c = lambda p: predict_conc(lay, th, p).value
    lap_fd = (c(pts + e) - 2 * c(pts) + c(pts - e)) / h**2
    assert residual_c_field(lay, th, pts, 2) == pytest.approx(np.sqrt(np.mean(lap_fd**2)), rel=1e-4)


def test_dirichlet_examples_and_loop_oracle():
    lay = _layout(2)
    pb, ps = _points(10, seed=1), _points(12, seed=2)
    th = _constant_nets(lay, 0.0, 1.0)
    b, s = residual_dirichlet(lay, th, pb, ps)
    assert b == 0.0 and s == pytest.approx(1.0, abs=1e-6)
    th = _constant_nets(lay, 0.0, 1e-7)
    assert residual_dirichlet(lay, th, pb, ps)[1] == 0.0
    th = _theta(lay, 6)
    b, s = residual_dirichlet(lay, th, pb, ps)
    cb = [predict_conc(lay, th, p[None]).value[0] for p in pb]
    cs = [predict_conc(lay, th, p[None]).value[0] for p in ps]
    assert b == pytest.approx(np.sqrt(np.mean([(1 - v) ** 2 for v in cb])), rel=1e-13)
    assert s == pytest.approx(np.sqrt(np.mean([(1e-7 - v) ** 2 for v in cs])), rel=1e-13)


def test_f2_degenerate_gamma_and_beta_paths():
    lay = _layout(3)
    th = _theta(lay, 7)
    pts = _points(40)
    e = predict_eps(lay, th, pts, spatial=True)
    c = predict_conc(lay, th, pts, spatial=True)
    th0 = th.copy()
    th0[lay.gamma_index] = -np.inf
    d = diffusion_developed(e, c, 1.0, floor=0.0)
    assert residual_f2(lay, th0, pts, 1.0) == pytest.approx(np.sqrt(np.mean(d**2)), rel=1e-13)
    general = diffusion_developed(e, c, 1.0 + 1e-300, floor=0.0)  # forces the general branch
    np.testing.assert_allclose(general, diffusion_developed_beta1(e, c), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- diffusion operator


def _jets_1d(eps_fn, c_fn, x):
    xs = sp.Symbol("x")
    out = []
    for f in (eps_fn, c_fn):
        expr = f(xs)
        vals = [sp.lambdify(xs, sp.diff(expr, xs, k), "numpy")(x) for k in range(3)]
        vals = [np.broadcast_to(np.asarray(v, float), x.shape).copy() for v in vals]
        out.append(DualBatch(vals[0], {0: vals[1]}, {0: vals[2]}))
    return out


def test_developed_matches_symbolic_compact():
    xs, beta = sp.Symbol("x"), sp.Rational(1, 2)
    eps = 2 + sp.sin(xs)
    conc = sp.cos(xs)
    compact = sp.diff(eps ** (1 + beta) * sp.diff(conc / eps, xs), xs)
    f = sp.lambdify(xs, compact, "numpy")
    x = np.random.default_rng(0).uniform(-3, 3, 100)
    e, c = _jets_1d(lambda s: 2 + sp.sin(s), lambda s: sp.cos(s), x)
    np.testing.assert_allclose(diffusion_developed(e, c, 0.5, floor=0.0), f(x), atol=1e-8, rtol=1e-8)


def test_constant_porosity_identity():
    x = np.linspace(0, 1, 7)
    e, c = _jets_1d(lambda s: sp.Float(0.3) + 0 * s, lambda s: sp.sin(3 * s), x)
    for beta in (0.5, 1.0, 1.7):
        np.testing.assert_allclose(diffusion_developed(e, c, beta), 0.3**beta * c.dd[0], rtol=1e-12)


def test_proportional_fields_vanish_at_beta_one():
    x = np.linspace(0, 1, 9)
    e, _ = _jets_1d(lambda s: 0.5 + 0.3 * sp.sin(s), lambda s: s, x)
    np.testing.assert_allclose(diffusion_developed(e, e, 1.0), 0.0, atol=1e-15)


def test_floor_guard():
    x = np.linspace(0, 1, 5)
    e, c = _jets_1d(lambda s: sp.Float(0.01) + 0 * s, lambda s: s, x)
    with pytest.raises(ValueError):
        diffusion_developed(e, c, 0.5)


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6), beta=st.floats(0.3, 1.5), dim=st.sampled_from([2, 3]))
def test_compact_equals_developed_on_networks(seed, beta, dim):
    rng = np.random.default_rng(seed)
    es, cs = NetworkSpec(dim, 2, 6), NetworkSpec(dim, 2, 6, "linear")
    eps_net = FieldNet(rng.normal(0, 0.7, es.n_params), es, shift=0.05, scale=0.95)
    conc_net = FieldNet(rng.normal(0, 0.7, cs.n_params), cs)
    pts = rng.uniform(0, 1, (25, dim))
    dev = diffusion_developed(eps_net.jet(pts), conc_net.jet(pts), beta)
    comp = diffusion_compact(eps_net, conc_net, pts, beta)
    np.testing.assert_allclose(dev, comp, rtol=1e-8, atol=1e-8 * np.abs(comp).max())


# ---------------------------------------------------------------- potentials


def _obs(n=60, dim=1, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array(list(Region) * (n // len(Region)), dtype=np.int8)
    pts = rng.uniform(0.1, 0.9, (labels.size, dim + 1))
    obs = ObservationSet(pts, rng.random(labels.size), labels)
    obs.rai_minus = obs.labels == Region.RAI
    return obs


@pytest.mark.parametrize("step", [1, 2, 3])
def test_task_lists(step):
    lay = _layout(step)
    spec = build_potential(step, lay, _obs())
    kinds = [t.kind for t in spec.tasks]
    assert kinds[:2] == [TaskKind.EPS_FIT_SOLID, TaskKind.EPS_FIT_RAIPLUS]
    if step == 2:
        assert kinds[2:] == [TaskKind.F1_REACTION, TaskKind.C_LAPLACE, TaskKind.C_DIRICHLET_CONST]
    if step == 3:
        assert TaskKind.C_LAPLACE not in kinds and kinds[-1] == TaskKind.F2_FULL


@pytest.mark.parametrize("step", [1, 2, 3])
def test_potential_is_hand_sum_and_linear(step):
    lay = _layout(step)
    spec = build_potential(step, lay, _obs(), beta=0.5)
    th = _theta(lay, 8)
    losses = task_losses(spec, th)
    w = np.random.default_rng(0).uniform(0.1, 2, spec.n_tasks)
    assert assemble_potential(spec, th, w) == pytest.approx(w @ losses + log_prior(th), rel=1e-13)
    assert assemble_potential(spec, th, np.zeros(spec.n_tasks)) == pytest.approx(log_prior(th))
    w2 = w.copy()
    w2[0] *= 3
    diff = assemble_potential(spec, th, w2) - assemble_potential(spec, th, w)
    assert diff == pytest.approx(2 * w[0] * losses[0], rel=1e-10)
    assert np.all(losses >= 0)


def test_losses_match_rms_residuals():
    lay = _layout(3)
    obs = _obs()
    spec = build_potential(3, lay, obs, beta=0.5, upsilon_C0=0.5)
    th = _theta(lay, 9)
    losses = task_losses(spec, th)
    plus = obs.mask(Region.RAI, Region.RAI_PLUS_EXTRA)
    rai = obs.mask(Region.RAI)
    assert losses[1] == pytest.approx(0.5 * residual_eps_fit(lay, th, obs.points[plus], obs.intensities[plus]) ** 2)
    assert losses[2] == pytest.approx(0.5 * residual_f1(lay, th, obs.points[rai], 0.5) ** 2)
    assert losses[5] == pytest.approx(0.5 * residual_f2(lay, th, obs.points[rai], 0.5, 0.5) ** 2)
    b, s = residual_dirichlet(lay, th, obs.subset(Region.BOUNDARY), obs.subset(Region.SOLID))
    assert losses[4] == pytest.approx(0.5 * (b * b + s * s))


def test_perfect_step1_fit_leaves_prior():
    lay = _layout(1)
    th = _constant_nets(lay, 0.0)
    obs = _obs()
    obs.intensities[:] = 0.5
    spec = build_potential(1, lay, obs)
    assert assemble_potential(spec, th) == pytest.approx(log_prior(th), abs=1e-28)


@pytest.mark.parametrize("step,beta", [(1, 1.0), (2, 1.0), (3, 1.0), (3, 0.5)])
def test_gradients_against_fd(step, beta):
    lay = ParamLayout(NetworkSpec(2, 2, 3), NetworkSpec(2, 2, 3, "linear"), step)
    spec = build_potential(step, lay, _obs(30), beta=beta)
    th = _theta(lay, 10)
    w = np.linspace(0.5, 1.5, spec.n_tasks)
    g, task_grads, u, _ = grad_potential(spec, th, w)
    fd = central_diff(lambda x: assemble_potential(spec, x, w), th, 1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)
    assert u == pytest.approx(assemble_potential(spec, th, w))
    for k in range(spec.n_tasks):
        fdk = central_diff(lambda x: task_losses(spec, x)[k], th, 1e-6)
        np.testing.assert_allclose(task_grads[k], fdk, rtol=1e-5, atol=1e-6)


def test_collapsed_porosity_raises():
    lay = _layout(3)
    th = _constant_nets(lay, -40.0, 0.0)
    spec = build_potential(3, lay, _obs())
    with pytest.raises(NonFiniteResidualError):
        task_losses(spec, th)


def test_negative_weights_rejected():
    lay = _layout(1)
    spec = build_potential(1, lay, _obs())
    with pytest.raises(ValueError):
        assemble_potential(spec, _theta(lay), [1.0, -1.0])


def test_ground_truth_is_self_consistent():
    """F1 and F2 on solver output with the true constants are near zero."""
    cst = ModelConstants(21.3912, 2.4, beta=1.0)
    g = make_geometry_1d(nx=200, nt=240)
    eps, conc = solve_dissolution(g, cst)
    e, c = eps.values, conc.values
    dt = eps.times[1] - eps.times[0]
    h = g.spacing[0]
    chi = e[:-1] < 1 - 1e-12
    # implicit Euler: the forward difference pairs with the concentration at the new time
    f1 = cst.alpha * (e[1:] - e[:-1]) / dt - c[1:] * chi
    assert np.max(np.abs(f1[chi & (e[1:] < 1)])) < 1e-9
    # heterogeneous diffusion balance with the FV stencil in the interior
    u = c / e
    k = e**2
    kf = 2 * k[:, 1:] * k[:, :-1] / (k[:, 1:] + k[:, :-1])
    div = (kf[:, 1:] * (u[:, 2:] - u[:, 1:-1]) - kf[:, :-1] * (u[:, 1:-1] - u[:, :-2])) / h**2
    lhs = cst.gamma * ((c[1:, 1:-1] - c[:-1, 1:-1]) / dt + (e[1:, 1:-1] - e[:-1, 1:-1]) / dt)
    f2 = lhs - div[1:]
    # cells that reached eps = 1 within the step had their porosity capped
    capped = (chi & (e[1:] >= 1))[:, 1:-1]
    # the fixed point leaves eps off by up to the tolerance, which the
    # discrete diffusion operator amplifies by 1/h^2
    assert np.max(np.abs(f2[~capped])) < 10 * 1e-10 / h**2


def test_benchmark_rows(tmp_path):
    rows = benchmark_operators({"tiny": (50, 2)}, repetitions=2)
    forms = {r["form"] for r in rows}
    assert {"compact_beta0.5", "developed_general", "compact_beta1", "developed_beta1"} <= forms
    assert all(r["speedup"] == 1.0 for r in rows if r["form"].startswith("compact"))
    write_benchmark_csv(tmp_path / "b.csv", rows)
    assert (tmp_path / "b.csv").read_text().startswith("form,grid,mean_ns,speedup")
