"""Hamiltonian Monte Carlo with Inverse-Dirichlet adaptive task weights.

The chain runs ``n_adapt`` adaptive iterations, in which the task weights are
recomputed from the per-task gradient variances at the current state, and
then ``n_samples`` iterations with the weights frozen.  Every iteration
draws a fresh standard Gaussian momentum (identity mass matrix), integrates
the Hamiltonian dynamics with leapfrog and applies a Metropolis correction.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateTaskError, DivergenceError, NonFiniteGradientError, NonFiniteResidualError, SamplerAbort
from .potentials import grad_potential
from .surrogate import save_params

__all__ = [
    "SamplerConfig",
    "ChainRecord",
    "PotentialTarget",
    "QuadraticTarget",
    "leapfrog",
    "adapt_weights",
    "sample",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """AW-HMC hyperparameters: adaptive steps, samples, leapfrog steps and size."""

    n_adapt: int
    n_samples: int
    n_leapfrog: int
    dt: float
    seed: int = 0
    checkpoint_every: int = 50
    abort_window: int = 50
    abort_rate: float = 0.9

    def __post_init__(self):
        if min(self.n_adapt, self.n_samples, self.n_leapfrog) < 1 or self.dt <= 0:
            raise ValueError("sampler sizes and step must be positive")
        if self.n_adapt >= self.n_samples:
            raise ValueError("adaptive steps must be fewer than samples")

    @property
    def n_total(self):
        return self.n_adapt + self.n_samples


@dataclass
class ChainRecord:
    """Per-iteration history of an AW-HMC chain."""

    thetas: np.ndarray
    lambdas: np.ndarray
    h_before: np.ndarray
    h_after: np.ndarray
    accepted: np.ndarray
    divergent: np.ndarray
    losses: np.ndarray
    n_adapt: int
    task_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.thetas.shape[0]

    @property
    def samples(self):
        """Post-adaptive states (the ones entering model averages)."""
        return self.thetas[self.n_adapt :]

    @property
    def final_weights(self):
        return self.lambdas[-1]

    @property
    def last_theta(self):
        return self.thetas[-1]

    def acceptance_rate(self, post_adaptive=True):
        acc = self.accepted[self.n_adapt :] if post_adaptive else self.accepted
        return float(np.mean(acc))

    def write_csv(self, path, alpha_index=None, gamma_index=None):
        n_tasks = self.lambdas.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["iteration", "H_before", "H_after", "accept", "divergent"]
                + [f"lambda{k}" for k in range(n_tasks)]
                + [f"loss{k}" for k in range(n_tasks)]
                + ["alpha", "gamma"]
            )
            for i in range(len(self)):
                th = self.thetas[i]
                a = np.exp(th[alpha_index]) if alpha_index is not None else ""
                g = np.exp(th[gamma_index]) if gamma_index is not None else ""
                w.writerow(
                    [i, repr(float(self.h_before[i])), repr(float(self.h_after[i])), int(self.accepted[i]), int(self.divergent[i])]
                    + [repr(float(v)) for v in self.lambdas[i]]
                    + [repr(float(v)) for v in self.losses[i]]
                    + [a if a == "" else repr(float(a)), g if g == "" else repr(float(g))]
                )


class PotentialTarget:
    """Adapter exposing a :class:`PotentialSpec` to the sampler."""

    def __init__(self, spec):
        self.spec = spec
        self.n_tasks = spec.n_tasks
        self.task_names = tuple(t.kind.value for t in spec.tasks)

    def evaluate(self, theta):
        """``(task_grads, losses, prior, grad_prior)`` at ``theta``."""
        _, task_grads, u, losses = grad_potential(self.spec, theta, np.zeros(self.n_tasks))
        s2 = self.spec.sigma_theta**2
        return task_grads, losses, float(theta @ theta) / (2 * s2), theta / s2


class QuadraticTarget:
    """Sum of quadratic tasks ``0.5 (theta - m_k)^T A_k (theta - m_k)``; used for testing.

    With a single task, ``A = I`` and ``m = 0`` this is the standard Gaussian.
    """

    def __init__(self, precisions, means=None, prior_sigma=None):
        self.precisions = [np.atleast_2d(np.asarray(a, dtype=float)) for a in precisions]
        d = self.precisions[0].shape[0]
        self.means = [np.zeros(d)] * len(self.precisions) if means is None else [np.asarray(m, float) for m in means]
        self.prior_sigma = prior_sigma
        self.n_tasks = len(self.precisions)
        self.task_names = tuple(f"quad{k}" for k in range(self.n_tasks))

    def evaluate(self, theta):
        grads, losses = [], []
        for a, m in zip(self.precisions, self.means):
            r = theta - m
            g = a @ r
            grads.append(g)
            losses.append(0.5 * float(r @ g))
        if self.prior_sigma is None:
            prior, gprior = 0.0, np.zeros_like(theta)
        else:
            s2 = self.prior_sigma**2
            prior, gprior = float(theta @ theta) / (2 * s2), theta / s2
        return np.array(grads), np.array(losses), prior, gprior


def adapt_weights(task_grads):
    """Inverse-Dirichlet weights from per-task gradient vectors.

    ``lambda_k = sqrt(min_t Var(g_t) / Var(g_k))`` with the variance taken
    over the components of each gradient vector.  A lone task always gets
    weight 1.
    """
    g = np.atleast_2d(np.asarray(task_grads, dtype=float))
    if g.shape[0] < 1 or g.shape[1] < 2:
        raise ValueError("need at least one task gradient with two components")
    for k, row in enumerate(g):
        if not np.all(np.isfinite(row)):
            raise NonFiniteGradientError(k)
    if g.shape[0] == 1:
        return np.ones(1)
    var = g.var(axis=1)
    for k, v in enumerate(var):
        if v <= 0.0:
            raise DegenerateTaskError(k)
    lam = np.sqrt(var.min() / var)
    lam[np.argmin(var)] = 1.0
    return lam


def leapfrog(theta, momentum, dt, n_steps, grad_fn, grad0=None):
    """Stormer-Verlet integration with unit mass.

    ``grad_fn(theta)`` returns the potential gradient.  ``grad0`` may supply
    the gradient at the starting point.  Returns ``(theta, momentum, grad)``
    with ``grad`` evaluated at the final position.  Raises
    :class:`DivergenceError` on non-finite states.
    """
    q = np.array(theta, dtype=float)
    p = np.array(momentum, dtype=float)
    g = grad_fn(q) if grad0 is None else grad0
    p -= 0.5 * dt * g
    for i in range(n_steps):
        q += dt * p
        g = grad_fn(q)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(q))):
            raise DivergenceError(f"non-finite state at leapfrog step {i + 1}")
        if i < n_steps - 1:
            p -= dt * g
    p -= 0.5 * dt * g
    return q, p, g


class _State:
    __slots__ = ("theta", "task_grads", "losses", "prior", "gprior")

    def __init__(self, theta, evaluation):
        self.theta = theta
        self.task_grads, self.losses, self.prior, self.gprior = evaluation

    def grad(self, lam):
        return lam @ self.task_grads + self.gprior

    def energy(self, lam):
        return float(lam @ self.losses) + self.prior


def sample(target, config, theta0, out_dir=None, progress=None):
    """Run an AW-HMC chain and return its :class:`ChainRecord`.

    ``target`` provides ``evaluate(theta) -> (task_grads, losses, prior,
    grad_prior)`` and ``n_tasks``.  When ``out_dir`` is given, parameter
    checkpoints are written every ``config.checkpoint_every`` iterations.
    """
    rng = np.random.default_rng(config.seed)
    theta0 = np.array(theta0, dtype=float)
    state = _State(theta0, target.evaluate(theta0))
    if not np.isfinite(state.energy(np.ones(target.n_tasks))):
        raise NonFiniteResidualError(-1, "initial potential is not finite")
    n_total = config.n_total
    d = theta0.size
    rec = ChainRecord(
        thetas=np.empty((n_total, d)),
        lambdas=np.empty((n_total, target.n_tasks)),
        h_before=np.empty(n_total),
        h_after=np.empty(n_total),
        accepted=np.zeros(n_total, dtype=bool),
        divergent=np.zeros(n_total, dtype=bool),
        losses=np.empty((n_total, target.n_tasks)),
        n_adapt=config.n_adapt,
        task_names=getattr(target, "task_names", ()),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    lam = np.ones(target.n_tasks)
    for it in range(n_total):
        if it < config.n_adapt:
            lam = adapt_weights(state.task_grads)
        r0 = rng.standard_normal(d)
        h0 = state.energy(lam) + 0.5 * float(r0 @ r0)
        cache = {}

        def grad_fn(q):
            ev = target.evaluate(q)
            cache["q"], cache["ev"] = q, ev
            return lam @ ev[0] + ev[3]

        log_u = np.log(rng.uniform())
        try:
            q, p, _ = leapfrog(state.theta, r0, config.dt, config.n_leapfrog, grad_fn, state.grad(lam))
            proposal = _State(q, cache["ev"])
            h1 = proposal.energy(lam) + 0.5 * float(p @ p)
            divergent = not np.isfinite(h1)
        except (DivergenceError, NonFiniteGradientError, NonFiniteResidualError, FloatingPointError) as exc:
            log.debug("iteration %d diverged: %s", it, exc)
            h1, divergent, proposal = np.inf, True, None
        accept = (not divergent) and log_u < h0 - h1
        if accept:
            state = proposal
        rec.thetas[it] = state.theta
        rec.lambdas[it] = lam
        rec.h_before[it] = h0
        rec.h_after[it] = h1
        rec.accepted[it] = accept
        rec.divergent[it] = divergent
        rec.losses[it] = state.losses
        if it + 1 >= config.abort_window:
            window = rec.divergent[it + 1 - config.abort_window : it + 1]
            if window.mean() > config.abort_rate:
                raise SamplerAbort(
                    f"{int(window.sum())} of the last {config.abort_window} iterations diverged (iteration {it})"
                )
        if out_dir is not None and (it + 1) % config.checkpoint_every == 0:
            save_params(out_dir / f"theta_{it + 1:05d}.bin", state.theta)
        if progress is not None:
            progress(it, rec)
    return rec
