"""Multi-task potential energies and the heterogeneous diffusion operator.

Each task contributes ``lambda_k / (2 sigma_k^2) * RMS_k^2`` where the RMS
is taken over the task's point set; the prior adds ``|theta|^2 / (2 * 10^2)``.
Residuals are computed from batched network jets, and their gradients are
pulled back to the parameter vector through :func:`mlp_jet_vjp`.
"""

import csv
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import DualBatch, Tape, mlp_jet, mlp_jet_vjp
from .dns import C_SOLID, EPS_FLOOR
from .errors import NonFiniteGradientError, NonFiniteResidualError
from .imaging import Region
from .surrogate import SIGMA_THETA, NetworkSpec, ParamLayout, grad_log_prior, log_prior

__all__ = [
    "TaskKind",
    "TaskResidual",
    "PotentialSpec",
    "FieldNet",
    "build_potential",
    "task_losses",
    "assemble_potential",
    "grad_potential",
    "residual_eps_fit",
    "residual_f1",
    "residual_c_field",
    "residual_dirichlet",
    "residual_f2",
    "diffusion_developed",
    "diffusion_developed_beta1",
    "diffusion_compact",
    "benchmark_operators",
    "write_benchmark_csv",
]


class TaskKind(str, Enum):
    EPS_FIT_SOLID = "EPS_FIT_SOLID"
    EPS_FIT_RAIPLUS = "EPS_FIT_RAIPLUS"
    F1_REACTION = "F1_REACTION"
    C_LAPLACE = "C_LAPLACE"
    C_HEAT = "C_HEAT"
    C_DIRICHLET_CONST = "C_DIRICHLET_CONST"
    F2_FULL = "F2_FULL"


STEP_TASKS = {
    1: (TaskKind.EPS_FIT_SOLID, TaskKind.EPS_FIT_RAIPLUS),
    2: (
        TaskKind.EPS_FIT_SOLID,
        TaskKind.EPS_FIT_RAIPLUS,
        TaskKind.F1_REACTION,
        TaskKind.C_LAPLACE,
        TaskKind.C_DIRICHLET_CONST,
    ),
    3: (
        TaskKind.EPS_FIT_SOLID,
        TaskKind.EPS_FIT_RAIPLUS,
        TaskKind.F1_REACTION,
        TaskKind.C_HEAT,
        TaskKind.C_DIRICHLET_CONST,
        TaskKind.F2_FULL,
    ),
}


@dataclass
class TaskResidual:
    """One weighted term of the potential.

    ``points`` is a tuple of point arrays; only the Dirichlet task uses two
    (boundary, solid).  ``target`` holds image intensities for fitting tasks.
    """

    kind: TaskKind
    points: tuple
    target: np.ndarray = None
    sigma: float = 1.0

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        self.points = tuple(np.asarray(p, dtype=float) for p in self.points)
        for p in self.points:
            if p.shape[0] == 0:
                raise ValueError(f"task {self.kind.value} has an empty point set")
        if self.sigma <= 0:
            raise ValueError("task scale must be positive")


@dataclass
class PotentialSpec:
    layout: ParamLayout
    tasks: list
    beta: float = 1.0
    upsilon_C0: float = 1.0
    c0: float = C_SOLID
    sigma_theta: float = SIGMA_THETA
    eps_guard: float = 1e-6

    @property
    def step(self):
        return self.layout.step

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def spatial_dim(self):
        return self.layout.eps_spec.input_dim - 1


def build_potential(step, layout, obs, beta=1.0, upsilon_C0=1.0, c0=C_SOLID, sigma=1.0):
    """Task list of the step-``step`` potential from an :class:`ObservationSet`."""
    solid = obs.mask(Region.SOLID)
    plus = obs.mask(Region.RAI, Region.RAI_PLUS_EXTRA)
    rai = obs.mask(Region.RAI)
    fluid = obs.mask(Region.FLUID, Region.RAI_PLUS_EXTRA)
    bnd = obs.mask(Region.BOUNDARY)
    tasks = []
    for kind in STEP_TASKS[step]:
        if kind == TaskKind.EPS_FIT_SOLID:
            t = TaskResidual(kind, (obs.points[solid],), obs.intensities[solid], sigma)
        elif kind == TaskKind.EPS_FIT_RAIPLUS:
            t = TaskResidual(kind, (obs.points[plus],), obs.intensities[plus], sigma)
        elif kind == TaskKind.F1_REACTION:
            t = TaskResidual(kind, (obs.points[rai],), None, sigma)
        elif kind in (TaskKind.C_LAPLACE, TaskKind.C_HEAT):
            t = TaskResidual(kind, (obs.points[fluid],), None, sigma)
        elif kind == TaskKind.C_DIRICHLET_CONST:
            t = TaskResidual(kind, (obs.points[bnd], obs.points[solid]), None, sigma)
        else:
            t = TaskResidual(kind, (obs.points[obs.rai_minus],), None, sigma)
        tasks.append(t)
    return PotentialSpec(layout, tasks, beta, upsilon_C0, c0)


# ------------------------------------------------------------ diffusion operator


def _grad_terms(eps, conc, axes):
    lap_e = sum(eps.dd[a] for a in axes)
    lap_c = sum(conc.dd[a] for a in axes)
    g = sum(eps.d[a] * conc.d[a] for a in axes)
    q = sum(eps.d[a] * eps.d[a] for a in axes)
    return lap_e, lap_c, g, q


def diffusion_developed(eps, conc, beta, floor=EPS_FLOOR):
    """Developed form of ``div(eps^(1+beta) grad(C / eps))`` from jets.

    ``eps`` and ``conc`` are :class:`DualBatch` objects carrying first and
    second derivatives along the spatial axes (the keys of ``dd``).
    """
    e = eps.value
    if np.any(e < floor):
        raise ValueError(f"porosity below the floor {floor} in diffusion operator")
    axes = sorted(eps.dd)
    lap_e, lap_c, g, q = _grad_terms(eps, conc, axes)
    c = conc.value
    if beta == 1.0:
        return e * lap_c - c * lap_e
    eb1 = e ** (beta - 1.0)
    return eb1 * (e * lap_c - c * lap_e) + (beta - 1.0) * eb1 * g - (beta - 1.0) * eb1 / e * c * q


def diffusion_developed_beta1(eps, conc):
    """``eps * lap(C) - C * lap(eps)``, the unit tortuosity index case."""
    axes = sorted(eps.dd)
    lap_e = sum(eps.dd[a] for a in axes)
    lap_c = sum(conc.dd[a] for a in axes)
    return eps.value * lap_c - conc.value * lap_e


def _diffusion_partials(eps, conc, beta):
    """Value and partial derivatives of the developed operator.

    Returns ``(D, dD/de, dD/dc, {a: dD/de_a}, {a: dD/dc_a}, dD/de_aa, dD/dc_aa)``;
    second-derivative partials are the same for every axis.
    """
    axes = sorted(eps.dd)
    e, c = eps.value, conc.value
    lap_e, lap_c, g, q = _grad_terms(eps, conc, axes)
    if beta == 1.0:
        val = e * lap_c - c * lap_e
        return val, lap_c, -lap_e, {a: 0.0 for a in axes}, {a: 0.0 for a in axes}, -c, e
    b1 = beta - 1.0
    eb = e**beta
    eb1 = eb / e
    eb2 = eb1 / e
    eb3 = eb2 / e
    val = eb * lap_c - eb1 * c * lap_e + b1 * eb1 * g - b1 * eb2 * c * q
    d_e = beta * eb1 * lap_c - b1 * eb2 * c * lap_e + b1 * b1 * eb2 * g - b1 * (beta - 2.0) * eb3 * c * q
    d_c = -eb1 * lap_e - b1 * eb2 * q
    d_ea = {a: b1 * eb1 * conc.d[a] - 2.0 * b1 * eb2 * c * eps.d[a] for a in axes}
    d_ca = {a: b1 * eb1 * eps.d[a] for a in axes}
    return val, d_e, d_c, d_ea, d_ca, -eb1 * c, eb


@dataclass
class FieldNet:
    """A scalar field given by ``shift + scale * mlp(x)``."""

    theta: np.ndarray
    spec: NetworkSpec
    shift: float = 0.0
    scale: float = 1.0

    def jet(self, points, spatial=True, time_derivative=False):
        n_sp = self.spec.input_dim - 1
        d_axes = tuple(range(n_sp)) if spatial else ()
        if time_derivative:
            d_axes = d_axes + (n_sp,)
        dd_axes = tuple(range(n_sp)) if spatial else ()
        out = mlp_jet(self.theta, self.spec.sizes, points, d_axes, dd_axes, self.spec.output_activation)
        return DualBatch(
            self.shift + self.scale * out.value,
            {a: self.scale * v for a, v in out.d.items()},
            {a: self.scale * v for a, v in out.dd.items()},
        )

    def on_tape(self, tape, x):
        h = x
        s = self.spec.sizes
        k = 0
        n_layers = len(s) - 1
        for li, (fin, fout) in enumerate(zip(s[:-1], s[1:])):
            w = tape.constant(self.theta[k : k + fin * fout].reshape(fin, fout))
            k += fin * fout
            b = tape.constant(self.theta[k : k + fout])
            k += fout
            h = tape.affine(h, w, b)
            if li < n_layers - 1 or self.spec.output_activation == "tanh_rect":
                h = h.tanh()
        if self.spec.output_activation == "tanh_rect":
            h = (h + 1.0) * 0.5
        return h * self.scale + self.shift


def diffusion_compact(eps_net, conc_net, points, beta):
    """``div(eps^(1+beta) grad(C / eps))`` by nested reverse mode on a tape.

    The whole composition is recorded, differentiated once with the graph
    kept, and each flux component differentiated again.
    """
    points = np.asarray(points, dtype=float)
    n_sp = points.shape[1] - 1
    tape = Tape()
    x = tape.input(points)
    e = eps_net.on_tape(tape, x)
    c = conc_net.on_tape(tape, x)
    u = c / e
    (gu,) = tape.gradient(u.sum(), [x], create_graph=True)
    k = e ** (1.0 + beta)
    out = np.zeros(points.shape[0])
    for a in range(n_sp):
        flux = k * gu.column(a)
        (gf,) = tape.gradient(flux.sum(), [x])
        out += gf[:, a]
    return out


# ------------------------------------------------------------ residuals


def _n_spatial(layout):
    return layout.eps_spec.input_dim - 1


def _eval(layout, theta, which, points, time_derivative=False, spatial=False, keep=False):
    spec = layout.eps_spec if which == "eps" else layout.conc_spec
    sl = layout.eps_slice if which == "eps" else layout.conc_slice
    n_sp = spec.input_dim - 1
    d_axes = tuple(range(n_sp)) if spatial else ()
    if time_derivative:
        d_axes = d_axes + (n_sp,)
    dd_axes = tuple(range(n_sp)) if spatial else ()
    res = mlp_jet(theta[sl], spec.sizes, points, d_axes, dd_axes, spec.output_activation, keep=keep)
    return res


def _pull(layout, theta, which, cache, out, gv, gd=None, gdd=None):
    sl = layout.eps_slice if which == "eps" else layout.conc_slice
    out[sl] += mlp_jet_vjp(theta[sl], cache, gv, gd, gdd)


def _rms(r):
    return float(np.sqrt(np.mean(r * r)))


def residual_eps_fit(layout, theta, points, intensities):
    """RMS of ``1 - eps - Im`` over the points."""
    e = _eval(layout, theta, "eps", points).value
    return _rms(1.0 - e - intensities)


def residual_f1(layout, theta, points, upsilon_C0=1.0):
    """RMS of ``alpha / uC0 * eps_t - C``."""
    n_sp = _n_spatial(layout)
    et = _eval(layout, theta, "eps", points, time_derivative=True).d[n_sp]
    c = _eval(layout, theta, "conc", points).value
    return _rms(layout.alpha(theta) / upsilon_C0 * et - c)


def residual_c_field(layout, theta, points, step):
    """RMS of ``lap C`` (step 2) or ``gamma C_t - lap C`` (step 3)."""
    n_sp = _n_spatial(layout)
    c = _eval(layout, theta, "conc", points, time_derivative=(step == 3), spatial=True)
    r = -c.laplacian(range(n_sp))
    if step == 2:
        r = -r
    else:
        r = r + layout.gamma(theta) * c.d[n_sp]
    return _rms(r)


def residual_dirichlet(layout, theta, boundary_points, solid_points, c0=C_SOLID):
    """``(boundary RMS, solid RMS)`` of the constant-concentration constraints."""
    cb = _eval(layout, theta, "conc", boundary_points).value
    cs = _eval(layout, theta, "conc", solid_points).value
    return _rms(1.0 - cb), _rms(c0 - cs)


def residual_f2(layout, theta, points, beta, upsilon_C0=1.0, floor=1e-6):
    """RMS of ``gamma (C_t + eps_t / uC0) - D(eps, C)`` with the developed operator."""
    n_sp = _n_spatial(layout)
    e = _eval(layout, theta, "eps", points, time_derivative=True, spatial=True)
    c = _eval(layout, theta, "conc", points, time_derivative=True, spatial=True)
    d = diffusion_developed(e, c, beta, floor)
    g = layout.gamma(theta)
    return _rms(g * (c.d[n_sp] + e.d[n_sp] / upsilon_C0) - d)


# ------------------------------------------------------------ task engine


def _task(spec, task, theta, want_grad):
    """Unweighted loss of one task and, optionally, its parameter gradient."""
    layout = spec.layout
    n_sp = spec.spatial_dim
    grad = np.zeros_like(theta) if want_grad else None
    s2 = task.sigma**2
    kind = task.kind

    if kind in (TaskKind.EPS_FIT_SOLID, TaskKind.EPS_FIT_RAIPLUS):
        (pts,) = task.points
        res = _eval(layout, theta, "eps", pts, keep=want_grad)
        e, cache = res if want_grad else (res, None)
        r = 1.0 - e.value - task.target
        loss = float(np.mean(r * r)) / (2 * s2)
        if want_grad:
            _pull(layout, theta, "eps", cache, grad, -r / (r.size * s2))
        return loss, r, grad

    if kind == TaskKind.F1_REACTION:
        (pts,) = task.points
        a = layout.alpha(theta) / spec.upsilon_C0
        er = _eval(layout, theta, "eps", pts, time_derivative=True, keep=want_grad)
        cr = _eval(layout, theta, "conc", pts, keep=want_grad)
        e, ec = er if want_grad else (er, None)
        c, cc = cr if want_grad else (cr, None)
        et = e.d[n_sp]
        r = a * et - c.value
        loss = float(np.mean(r * r)) / (2 * s2)
        if want_grad:
            g = r / (r.size * s2)
            _pull(layout, theta, "eps", ec, grad, np.zeros_like(g), {n_sp: a * g})
            _pull(layout, theta, "conc", cc, grad, -g)
            grad[layout.alpha_index] += float(g @ (a * et))
        return loss, r, grad

    if kind in (TaskKind.C_LAPLACE, TaskKind.C_HEAT):
        (pts,) = task.points
        heat = kind == TaskKind.C_HEAT
        cr = _eval(layout, theta, "conc", pts, time_derivative=heat, spatial=True, keep=want_grad)
        c, cc = cr if want_grad else (cr, None)
        lap = c.laplacian(range(n_sp))
        if heat:
            gam = layout.gamma(theta)
            r = gam * c.d[n_sp] - lap
        else:
            r = lap
        loss = float(np.mean(r * r)) / (2 * s2)
        if want_grad:
            g = r / (r.size * s2)
            sign = -1.0 if heat else 1.0
            gd = {a: np.zeros_like(g) for a in range(n_sp)}
            if heat:
                gd[n_sp] = gam * g
                grad[layout.gamma_index] += float(g @ (gam * c.d[n_sp]))
            _pull(layout, theta, "conc", cc, grad, np.zeros_like(g), gd, {a: sign * g for a in range(n_sp)})
        return loss, r, grad

    if kind == TaskKind.C_DIRICHLET_CONST:
        pb, ps = task.points
        br = _eval(layout, theta, "conc", pb, keep=want_grad)
        sr = _eval(layout, theta, "conc", ps, keep=want_grad)
        cb, bc = br if want_grad else (br, None)
        cs, sc = sr if want_grad else (sr, None)
        rb = 1.0 - cb.value
        rs = spec.c0 - cs.value
        loss = (float(np.mean(rb * rb)) + float(np.mean(rs * rs))) / (2 * s2)
        if want_grad:
            _pull(layout, theta, "conc", bc, grad, -rb / (rb.size * s2))
            _pull(layout, theta, "conc", sc, grad, -rs / (rs.size * s2))
        return loss, np.concatenate([rb, rs]), grad

    if kind == TaskKind.F2_FULL:
        (pts,) = task.points
        er = _eval(layout, theta, "eps", pts, time_derivative=True, spatial=True, keep=want_grad)
        cr = _eval(layout, theta, "conc", pts, time_derivative=True, spatial=True, keep=want_grad)
        e, ec = er if want_grad else (er, None)
        c, cc = cr if want_grad else (cr, None)
        if np.any(e.value < spec.eps_guard):
            raise NonFiniteResidualError(kind.value, "surrogate porosity collapsed to zero on RAI-")
        gam = layout.gamma(theta)
        uc = spec.upsilon_C0
        src = c.d[n_sp] + e.d[n_sp] / uc
        d, d_e, d_c, d_ea, d_ca, d_ess, d_css = _diffusion_partials(e, c, spec.beta)
        r = gam * src - d
        loss = float(np.mean(r * r)) / (2 * s2)
        if want_grad:
            g = r / (r.size * s2)
            axes = range(n_sp)
            ge_d = {a: -g * d_ea[a] for a in axes}
            ge_d[n_sp] = g * gam / uc
            gc_d = {a: -g * d_ca[a] for a in axes}
            gc_d[n_sp] = g * gam
            _pull(layout, theta, "eps", ec, grad, -g * d_e, ge_d, {a: -g * d_ess for a in axes})
            _pull(layout, theta, "conc", cc, grad, -g * d_c, gc_d, {a: -g * d_css for a in axes})
            grad[layout.gamma_index] += float(g @ (gam * src))
        return loss, r, grad

    raise ValueError(f"unknown task kind {kind}")


def task_losses(spec, theta):
    """Unweighted per-task losses ``RMS_k^2 / (2 sigma_k^2)``."""
    theta = spec.layout.check(theta)
    out = np.empty(spec.n_tasks)
    for k, task in enumerate(spec.tasks):
        loss, r, _ = _task(spec, task, theta, False)
        if not np.isfinite(loss):
            raise NonFiniteResidualError(k)
        out[k] = loss
    return out


def _weights(spec, weights):
    if weights is None:
        return np.ones(spec.n_tasks)
    w = np.asarray(weights, dtype=float)
    if w.shape != (spec.n_tasks,):
        raise ValueError(f"expected {spec.n_tasks} weights")
    if np.any(w < 0):
        raise ValueError("task weights must be non-negative")
    return w


def assemble_potential(spec, theta, weights=None):
    """``U = sum_k lambda_k L_k + |theta|^2 / (2 sigma_theta^2)``."""
    w = _weights(spec, weights)
    losses = task_losses(spec, theta)
    return float(w @ losses) + log_prior(theta, spec.sigma_theta)


def grad_potential(spec, theta, weights=None):
    """Gradient of the potential and of every task term.

    Returns ``(grad_U, task_grads, U, losses)`` where ``task_grads`` has one
    row per task holding the unweighted ``grad L_k``.
    """
    theta = spec.layout.check(theta)
    w = _weights(spec, weights)
    task_grads = np.empty((spec.n_tasks, theta.size))
    losses = np.empty(spec.n_tasks)
    for k, task in enumerate(spec.tasks):
        loss, _, g = _task(spec, task, theta, True)
        if not np.isfinite(loss):
            raise NonFiniteResidualError(k)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k)
        losses[k] = loss
        task_grads[k] = g
    total = w @ task_grads + grad_log_prior(theta, spec.sigma_theta)
    u = float(w @ losses) + log_prior(theta, spec.sigma_theta)
    return total, task_grads, u, losses


# ------------------------------------------------------------ benchmark


def _bench_instance(n_points, input_dim, seed):
    rng = np.random.default_rng(seed)
    eps_spec = NetworkSpec(input_dim, 4)
    conc_spec = NetworkSpec(input_dim, 3)

    def draw(spec):
        parts = []
        s = spec.sizes
        for fin, fout in zip(s[:-1], s[1:]):
            parts.append(rng.normal(0, 1 / np.sqrt(fin), fin * fout))
            parts.append(rng.normal(0, 1 / np.sqrt(fin), fout))
        return np.concatenate(parts)

    eps_net = FieldNet(draw(eps_spec), eps_spec, shift=EPS_FLOOR, scale=1.0 - EPS_FLOOR)
    conc_net = FieldNet(draw(conc_spec), conc_spec)
    pts = rng.uniform(0.0, 1.0, size=(n_points, input_dim))
    return eps_net, conc_net, pts


def _time_pair(ref, alt, repetitions):
    """Mean wall times of two callables, measured in alternation.

    Alternating the two keeps slow drifts of machine load from biasing the
    ratio.
    """
    ref()
    alt()
    t_ref, t_alt = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        ref()
        t1 = time.perf_counter_ns()
        alt()
        t2 = time.perf_counter_ns()
        t_ref.append(t1 - t0)
        t_alt.append(t2 - t1)
    return float(np.mean(t_ref)), float(np.mean(t_alt))


def benchmark_operators(grids=None, repetitions=10, seed=0):
    """Mean wall time (ns) of each diffusion-operator form.

    ``grids`` maps a grid label to ``(n_points, input_dim)``.  For every grid
    and tortuosity index the compact form is timed alongside its developed
    counterpart (general form for beta = 0.5, reduced form for beta = 1);
    the compact row is the reference with speedup 1.  Returns row dicts with
    keys ``form``, ``grid``, ``mean_ns``, ``speedup``.
    """
    if grids is None:
        grids = {"1D": (1159, 2), "2D": (3000, 3)}
    rows = []
    for label, (n, dim) in grids.items():
        eps_net, conc_net, pts = _bench_instance(n, dim, seed)

        def developed_general():
            return diffusion_developed(eps_net.jet(pts), conc_net.jet(pts), 0.5)

        def developed_b1():
            return diffusion_developed_beta1(eps_net.jet(pts), conc_net.jet(pts))

        for beta, form, fn in ((0.5, "developed_general", developed_general), (1.0, "developed_beta1", developed_b1)):

            def compact(beta=beta):
                return diffusion_compact(eps_net, conc_net, pts, beta)

            t0, t1 = _time_pair(compact, fn, repetitions)
            rows.append({"form": f"compact_beta{beta:g}", "grid": label, "mean_ns": t0, "speedup": 1.0})
            rows.append({"form": form, "grid": label, "mean_ns": t1, "speedup": t0 / t1})
    return rows


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["form", "grid", "mean_ns", "speedup"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
