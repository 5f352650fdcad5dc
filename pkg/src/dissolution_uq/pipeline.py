"""Sequential three-step inference and posterior diagnostics.

Step 1 regresses the porosity network on the image.  Step 2 adds the
concentration network, the reaction link and a quasi-static concentration
constraint.  Between steps 2 and 3 the ratio of the two sides of the full
concentration equation gives a first estimate of ``Dm*`` and the subset of
the reactive area where that estimate is positive.  Step 3 samples the fully
coupled potential.
"""

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .awhmc import ChainRecord, PotentialTarget, SamplerConfig, sample
from .dns import C_SOLID, FieldGrid, upscaled_porosity, write_field_binary
from .errors import EmptyRegionError, StepError
from .imaging import ObservationSet, Region, restrict_rai_minus
from .potentials import _diffusion_partials, build_potential
from .surrogate import NetworkSpec, ParamLayout, default_specs, extend_params, init_params, predict_conc, predict_eps

__all__ = [
    "InferenceSettings",
    "StepResult",
    "GammaPrior",
    "PipelineResult",
    "BmaField",
    "PosteriorSummary",
    "run_step1",
    "run_step2",
    "run_step3",
    "run_pipeline",
    "operator_samples",
    "gamma_prior_from_operators",
    "extract_gamma_prior",
    "bma_field",
    "bma_ce",
    "posterior_summary",
    "lognormal_mean",
    "lognormal_logpdf",
    "porosity_bounds",
    "write_diagnostics",
]

log = logging.getLogger(__name__)

# Sampler hyperparameters per step for the 1D and 2D problems: (N, dt).
TABLE_1D = ((50, 1e-3), (20, 5e-4), (4, 2e-4))
TABLE_2D = ((50, 1e-3), (40, 5e-4), (10, 3e-4))


@dataclass(frozen=True)
class InferenceSettings:
    """Everything the three sampling steps need besides the observations.

    ``task_sigma`` is the common noise scale shared by every likelihood term.
    """

    beta: float = 1.0
    upsilon_C0: float = 1.0
    c0: float = C_SOLID
    task_sigma: float = 0.01
    eps_spec: NetworkSpec = None
    conc_spec: NetworkSpec = None
    samplers: tuple = None
    percentile: float = 80.0
    seed: int = 0

    @classmethod
    def default(cls, ndim=1, fast=False, **kw):
        """Default network sizes and per-step sampler settings; ``fast`` shortens chains."""
        table = TABLE_1D if ndim == 1 else TABLE_2D
        n_s = 60 if fast else 200
        n_l = 50 if fast else (200 if ndim == 1 else 150)
        seed = kw.get("seed", 0)
        samplers = tuple(SamplerConfig(n, n_s, n_l, dt, seed=seed + 101 * k) for k, (n, dt) in enumerate(table))
        eps_spec, conc_spec = default_specs(ndim + 1)
        kw.setdefault("eps_spec", eps_spec)
        kw.setdefault("conc_spec", conc_spec)
        return cls(samplers=samplers, **kw)

    def layout(self, step):
        return ParamLayout(self.eps_spec, self.conc_spec, step)


@dataclass
class StepResult:
    step: int
    layout: ParamLayout
    spec: object
    chain: ChainRecord
    seconds: float

    @property
    def samples(self):
        return self.chain.samples


@dataclass
class GammaPrior:
    """Output of the step-2 analysis that seeds step 3.

    ``positive`` flags the RAI points (in observation order) whose final
    averaged ``Dm*`` estimate is positive; ``dm_per_sample`` holds one
    spatially averaged estimate per post-adaptive sample.
    """

    positive: np.ndarray
    gamma_bar: float
    dm_per_sample: np.ndarray
    cutoff: float


@dataclass
class PipelineResult:
    steps: dict = field(default_factory=dict)
    gamma_prior: GammaPrior = None
    observations: ObservationSet = None


def _run(step, spec, theta0, sampler, out_dir, progress):
    t0 = time.perf_counter()
    sub = None if out_dir is None else Path(out_dir) / f"step{step}"
    chain = sample(PotentialTarget(spec), sampler, theta0, out_dir=sub, progress=progress)
    chain.meta["step"] = step
    seconds = time.perf_counter() - t0
    log.info("step %d: %d iterations in %.1f s, acceptance %.2f", step, len(chain), seconds, chain.acceptance_rate())
    return StepResult(step, spec.layout, spec, chain, seconds)


def run_step1(obs, settings, out_dir=None, progress=None):
    """Sample the image-regression potential from a random start."""
    layout = settings.layout(1)
    spec = build_potential(1, layout, obs, settings.beta, settings.upsilon_C0, settings.c0, settings.task_sigma)
    theta0 = init_params(layout, settings.seed)
    return _run(1, spec, theta0, settings.samplers[0], out_dir, progress)


def run_step2(prev, obs, settings, out_dir=None, progress=None):
    """Add the concentration network and ``log alpha``; warm-start the porosity network."""
    layout = settings.layout(2)
    spec = build_potential(2, layout, obs, settings.beta, settings.upsilon_C0, settings.c0, settings.task_sigma)
    theta0 = extend_params(prev.chain.last_theta, prev.layout, layout, settings.seed + 1)
    return _run(2, spec, theta0, settings.samplers[1], out_dir, progress)


def _admissible_start(prev, points, guard):
    """Latest state of ``prev`` whose porosity clears ``guard`` on ``points``.

    The diffusion operator divides by the porosity, so step 3 cannot start
    where the surrogate has collapsed.  This is normally the last state.
    """
    for theta in prev.chain.thetas[::-1]:
        if predict_eps(prev.layout, theta, points).value.min() >= guard:
            return theta
    raise EmptyRegionError("RAI_MINUS", "the porosity surrogate collapses on RAI- in every step-2 state")


def run_step3(prev, obs, settings, gamma_prior, out_dir=None, progress=None):
    """Sample the fully coupled potential, starting ``log gamma`` at the step-2 estimate."""
    if not obs.rai_minus.any():
        raise EmptyRegionError("RAI_MINUS", "step 3 needs a non-empty RAI- set")
    layout = settings.layout(3)
    spec = build_potential(3, layout, obs, settings.beta, settings.upsilon_C0, settings.c0, settings.task_sigma)
    start = _admissible_start(prev, obs.points[obs.rai_minus], spec.eps_guard)
    theta0 = extend_params(start, prev.layout, layout, settings.seed + 2, log_gamma=np.log(gamma_prior.gamma_bar))
    return _run(3, spec, theta0, settings.samplers[2], out_dir, progress)


# ------------------------------------------------------------ gamma prior


def operator_samples(layout, samples, points, beta, upsilon_C0=1.0):
    """Source ``C_t + eps_t / uC0`` and diffusion ``D(eps, C)`` for every sample.

    Both arrays have shape ``(n_samples, n_points)``.
    """
    n_sp = points.shape[1] - 1
    src = np.empty((len(samples), points.shape[0]))
    dif = np.empty_like(src)
    for i, th in enumerate(samples):
        e = predict_eps(layout, th, points, time_derivative=True, spatial=True)
        c = predict_conc(layout, th, points, time_derivative=True, spatial=True)
        src[i] = c.d[n_sp] + e.d[n_sp] / upsilon_C0
        dif[i] = _diffusion_partials(e, c, beta)[0]
    return src, dif


def gamma_prior_from_operators(source, diffusion, percentile=80.0):
    """Estimate ``gamma`` from per-sample operator fields on the RAI.

    For each sample the running (cumulative) means of both operators give a
    pointwise ``Dm* = source / diffusion``; its average over the points where
    it is positive is that sample's estimate.  Estimates above the given
    percentile are dropped and the prior mean is the average of the inverted
    remainder.
    """
    source = np.atleast_2d(source)
    diffusion = np.atleast_2d(diffusion)
    counts = np.arange(1, source.shape[0] + 1)[:, None]
    src_bar = np.cumsum(source, axis=0) / counts
    dif_bar = np.cumsum(diffusion, axis=0) / counts
    with np.errstate(divide="ignore", invalid="ignore"):
        dm = src_bar / dif_bar
    ok = np.isfinite(dm) & (dm > 0)
    have = ok.any(axis=1)
    if not have.any():
        raise EmptyRegionError("RAI_MINUS", "no sample gives a positive Dm* estimate on the RAI")
    per_sample = np.array([dm[i][ok[i]].mean() for i in np.flatnonzero(have)])
    cutoff = float(np.percentile(per_sample, percentile))
    kept = per_sample[per_sample <= cutoff]
    gamma_bar = float(np.mean(1.0 / kept))
    return GammaPrior(positive=ok[-1].copy(), gamma_bar=gamma_bar, dm_per_sample=per_sample, cutoff=cutoff)


def extract_gamma_prior(step2, obs, settings):
    """Run the ``Dm*`` analysis on the step-2 samples and restrict ``obs`` to RAI-.

    Updates ``obs.rai_minus`` in place (honouring its quota) and returns the
    :class:`GammaPrior`.
    """
    rai_pts = obs.subset(Region.RAI)
    if rai_pts.shape[0] == 0:
        raise EmptyRegionError("RAI", "the image shows no reactive area")
    src, dif = operator_samples(step2.layout, step2.samples, rai_pts, settings.beta, settings.upsilon_C0)
    prior = gamma_prior_from_operators(src, dif, settings.percentile)
    restrict_rai_minus(obs, prior.positive, seed=settings.seed)
    log.info(
        "gamma prior %.4g from %d samples; RAI- keeps %d of %d points",
        prior.gamma_bar,
        prior.dm_per_sample.size,
        int(obs.rai_minus.sum()),
        rai_pts.shape[0],
    )
    return prior


@contextmanager
def _step_context(step):
    try:
        yield
    except StepError:
        raise
    except (ArithmeticError, RuntimeError) as exc:
        raise StepError(step, exc) from exc


def run_pipeline(obs, settings, steps=(1, 2, 3), out_dir=None, progress=None):
    """Run the requested prefix of the three-step schedule."""
    steps = tuple(sorted(set(steps)))
    if steps not in ((1,), (1, 2), (1, 2, 3)):
        raise ValueError("steps must be a prefix of 1,2,3")
    result = PipelineResult(observations=obs)
    if not obs.mask(Region.RAI).any():
        raise EmptyRegionError("RAI", "the image shows no reactive area")
    with _step_context(1):
        result.steps[1] = run_step1(obs, settings, out_dir, progress)
    if 2 in steps:
        with _step_context(2):
            result.steps[2] = run_step2(result.steps[1], obs, settings, out_dir, progress)
    if 3 in steps:
        with _step_context(3):
            result.gamma_prior = extract_gamma_prior(result.steps[2], obs, settings)
            result.steps[3] = run_step3(result.steps[2], obs, settings, result.gamma_prior, out_dir, progress)
    return result


# ------------------------------------------------------------ model averages


@dataclass
class BmaField:
    mean: np.ndarray
    std: np.ndarray
    n_samples: int


def _predict(layout, theta, points, which):
    if which == "eps":
        return predict_eps(layout, theta, points).value
    if which == "conc":
        return predict_conc(layout, theta, points).value
    raise ValueError(f"unknown field {which!r}")


def bma_field(layout, samples, points, shape=None, which="eps"):
    """Pointwise mean and population standard deviation over samples."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("no samples to average")
    s1 = np.zeros(points.shape[0])
    s2 = np.zeros(points.shape[0])
    for th in samples:
        v = _predict(layout, th, points, which)
        s1 += v
        s2 += v * v
    n = samples.shape[0]
    mean = s1 / n
    std = np.sqrt(np.maximum(s2 / n - mean * mean, 0.0))
    if shape is not None:
        mean, std = mean.reshape(shape), std.reshape(shape)
    return BmaField(mean, std, n)


def _residuals(layout, theta, points, which, beta, upsilon_C0):
    n_sp = points.shape[1] - 1
    if which == "eps":
        return predict_eps(layout, theta, points).value
    if which == "F1":
        e = predict_eps(layout, theta, points, time_derivative=True)
        c = predict_conc(layout, theta, points)
        return layout.alpha(theta) / upsilon_C0 * e.d[n_sp] - c.value
    if which == "F2":
        e = predict_eps(layout, theta, points, time_derivative=True, spatial=True)
        c = predict_conc(layout, theta, points, time_derivative=True, spatial=True)
        d = _diffusion_partials(e, c, beta)[0]
        return layout.gamma(theta) * (c.d[n_sp] + e.d[n_sp] / upsilon_C0) - d
    raise ValueError(f"unknown diagnostic {which!r}")


def bma_ce(layout, samples, points, which="eps", reference=None, beta=1.0, upsilon_C0=1.0):
    """Cumulative-mean error curve, one value per sample.

    For ``"eps"`` the running mean of the porosity predictions is compared
    with ``reference``; for ``"F1"``/``"F2"`` the running mean of the residual
    field is compared with zero.  The norm is the mean square over points.
    """
    if which == "eps" and reference is None:
        raise ValueError("the porosity diagnostic needs a reference field")
    ref = 0.0 if reference is None else np.asarray(reference, dtype=float).ravel()
    total = np.zeros(points.shape[0])
    out = np.empty(len(samples))
    for i, th in enumerate(samples):
        total += _residuals(layout, th, points, which, beta, upsilon_C0)
        err = total / (i + 1) - ref
        out[i] = float(np.mean(err * err))
    return out


# ------------------------------------------------------------ posterior summary


def lognormal_mean(mu, sigma):
    return float(np.exp(mu + 0.5 * sigma * sigma))


def lognormal_logpdf(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    z = (np.log(x) - mu) / sigma
    return -0.5 * z * z - np.log(x * sigma * np.sqrt(2.0 * np.pi))


@dataclass
class PosteriorSummary:
    log_alpha: np.ndarray
    log_gamma: np.ndarray
    mu_alpha: float
    sigma_alpha: float
    mu_gamma: float
    sigma_gamma: float
    level: float = 0.95

    @property
    def mu(self):
        return self.mu_gamma - self.mu_alpha

    @property
    def sigma(self):
        return float(np.sqrt(self.sigma_alpha**2 + self.sigma_gamma**2))

    @property
    def da2_mean(self):
        return lognormal_mean(self.mu, self.sigma)

    @property
    def da2_var(self):
        s2 = self.sigma**2
        return float(np.exp(2 * self.mu + s2) * np.expm1(s2))

    def da2_interval(self, level=None):
        level = self.level if level is None else level
        z = norm.ppf(0.5 + level / 2.0)
        return float(np.exp(self.mu - z * self.sigma)), float(np.exp(self.mu + z * self.sigma))

    def da2_logpdf(self, x):
        return lognormal_logpdf(x, self.mu, self.sigma)

    def percentiles(self, q=(2.5, 25, 50, 75, 97.5)):
        return {
            "alpha": dict(zip(map(str, q), np.exp(np.percentile(self.log_alpha, q)).tolist())),
            "gamma": dict(zip(map(str, q), np.exp(np.percentile(self.log_gamma, q)).tolist())),
        }

    def to_dict(self):
        lo, hi = self.da2_interval()
        return {
            "alpha": {"mu": self.mu_alpha, "sigma": self.sigma_alpha, "n": int(self.log_alpha.size)},
            "gamma": {"mu": self.mu_gamma, "sigma": self.sigma_gamma, "n": int(self.log_gamma.size)},
            "Da2": {"mu": self.mu, "sigma": self.sigma, "mean": self.da2_mean, "var": self.da2_var, "interval": [lo, hi], "level": self.level},
            "Da2_star_median": float(np.exp(-self.mu_alpha)),
            "Dm_star_median": float(np.exp(-self.mu_gamma)),
            "percentiles": self.percentiles(),
        }


def posterior_summary(log_alpha, log_gamma, level=0.95):
    """Log-space moments of both inverse parameters and the composed ``Da2`` law."""
    la = np.asarray(log_alpha, dtype=float).ravel()
    lg = np.asarray(log_gamma, dtype=float).ravel()
    if la.size == 0 or lg.size == 0:
        raise ValueError("need samples of both inverse parameters")
    return PosteriorSummary(la, lg, float(la.mean()), float(la.std()), float(lg.mean()), float(lg.std()), level)


def summarize_result(result, level=0.95):
    """Pool ``log alpha`` over steps 2 and 3 and take ``log gamma`` from step 3."""
    s2, s3 = result.steps[2], result.steps[3]
    la = np.concatenate([s2.samples[:, s2.layout.alpha_index], s3.samples[:, s3.layout.alpha_index]])
    lg = s3.samples[:, s3.layout.gamma_index]
    return posterior_summary(la, lg, level)


def porosity_bounds(bma, solid_mask, confidence=0.95):
    """Interval for the residual porosity of the solid matrix at the first time slice.

    ``bma`` holds ``(Nt, *space)`` fields and ``solid_mask`` flags solid
    voxels of the first slice.  The bounds are the mean over those voxels
    plus or minus ``z`` pooled standard deviations.
    """
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    mask = np.asarray(solid_mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("SOLID", "no solid voxel at the first time slice")
    m = float(bma.mean[0][mask].mean())
    s = float(np.sqrt(np.mean(bma.std[0][mask] ** 2)))
    z = norm.ppf(0.5 + confidence / 2.0)
    return m - z * s, m + z * s


# ------------------------------------------------------------ output


def write_diagnostics(result, out_dir, grid_points, grid_shape, axes, times, eps_truth=None):
    """Write chains, model-average fields, error curves and the posterior summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obs = result.observations
    curves = {}
    phi = {"t": np.asarray(times, dtype=float)}
    if eps_truth is not None:
        phi["truth"] = upscaled_porosity(FieldGrid(np.asarray(eps_truth).reshape(grid_shape), axes, times))
    for k, res in sorted(result.steps.items()):
        lay = res.layout
        res.chain.write_csv(out / f"chain_step{k}.csv", lay.alpha_index, lay.gamma_index)
        bma = bma_field(lay, res.samples, grid_points, grid_shape)
        mean_field = FieldGrid(bma.mean, axes, times, "eps_mean")
        phi[f"step{k}"] = upscaled_porosity(mean_field)
        write_field_binary(out / f"bma_eps_mean_step{k}.bin", mean_field)
        write_field_binary(out / f"bma_eps_std_step{k}.bin", FieldGrid(bma.std, axes, times, "eps_std"))
        if eps_truth is not None:
            curves[f"eps_step{k}"] = bma_ce(lay, res.samples, grid_points, "eps", eps_truth)
        if k >= 2:
            curves[f"F1_step{k}"] = bma_ce(lay, res.samples, obs.subset(Region.RAI), "F1", upsilon_C0=res.spec.upsilon_C0)
        if k == 3:
            curves["F2_step3"] = bma_ce(
                lay, res.samples, obs.points[obs.rai_minus], "F2", beta=res.spec.beta, upsilon_C0=res.spec.upsilon_C0
            )
    with open(out / "upscaled_porosity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(phi))
        for row in zip(*phi.values()):
            w.writerow([repr(float(v)) for v in row])
    with open(out / "bma_ce.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "sample", "value"])
        for name, curve in curves.items():
            for i, v in enumerate(curve):
                w.writerow([name, i, repr(float(v))])
    summary = None
    if 3 in result.steps:
        summary = summarize_result(result)
        doc = summary.to_dict()
        doc["gamma_prior"] = {
            "gamma_bar": result.gamma_prior.gamma_bar,
            "cutoff": result.gamma_prior.cutoff,
            "rai_minus_points": int(obs.rai_minus.sum()),
        }
        doc["step_seconds"] = {str(k): r.seconds for k, r in result.steps.items()}
        (out / "posterior.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        for name, values in (("alpha", np.exp(summary.log_alpha)), ("gamma", np.exp(summary.log_gamma))):
            counts, edges = np.histogram(values, bins=30)
            with open(out / f"hist_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lower", "upper", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        dm = result.gamma_prior.dm_per_sample
        np.savetxt(out / "dm_star_step2.csv", dm, delimiter=",", header="dm_star", comments="")
    return curves, summary
