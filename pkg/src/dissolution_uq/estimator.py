"""scikit-learn style wrapper around the three-step inference."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .awhmc import SamplerConfig
from .dns import C_SOLID, FieldGrid
from .imaging import extract_observations
from .pipeline import TABLE_1D, InferenceSettings, bma_field, run_pipeline, summarize_result
from .surrogate import NetworkSpec

__all__ = ["DissolutionInverter"]


class DissolutionInverter(BaseEstimator):
    """Posterior over the surrogate fields and the two inverse parameters.

    ``fit`` takes a micro-CT :class:`FieldGrid` stack (not a feature matrix:
    region labels depend on the whole space-time image).  ``predict`` takes
    ``(n, ndim + 1)`` space-time points and returns the model-averaged
    porosity, optionally with its standard deviation.
    """

    def __init__(
        self,
        n_obs=7725,
        fractions=None,
        radius=(2, 1),
        beta=1.0,
        upsilon_C0=1.0,
        c0=C_SOLID,
        task_sigma=0.01,
        n_samples=200,
        n_leapfrog=200,
        n_adapt=tuple(n for n, _ in TABLE_1D),
        dt=tuple(d for _, d in TABLE_1D),
        hidden_eps=4,
        hidden_conc=3,
        width=32,
        percentile=80.0,
        steps=(1, 2, 3),
        seed=0,
    ):
        self.n_obs = n_obs
        self.fractions = fractions
        self.radius = radius
        self.beta = beta
        self.upsilon_C0 = upsilon_C0
        self.c0 = c0
        self.task_sigma = task_sigma
        self.n_samples = n_samples
        self.n_leapfrog = n_leapfrog
        self.n_adapt = n_adapt
        self.dt = dt
        self.hidden_eps = hidden_eps
        self.hidden_conc = hidden_conc
        self.width = width
        self.percentile = percentile
        self.steps = steps
        self.seed = seed

    def _settings(self, input_dim):
        samplers = tuple(
            SamplerConfig(n, self.n_samples, self.n_leapfrog, d, seed=self.seed + 101 * k)
            for k, (n, d) in enumerate(zip(self.n_adapt, self.dt))
        )
        return InferenceSettings(
            beta=self.beta,
            upsilon_C0=self.upsilon_C0,
            c0=self.c0,
            task_sigma=self.task_sigma,
            eps_spec=NetworkSpec(input_dim, self.hidden_eps, self.width),
            conc_spec=NetworkSpec(input_dim, self.hidden_conc, self.width),
            samplers=samplers,
            percentile=self.percentile,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        if not isinstance(X, FieldGrid):
            raise TypeError("fit expects a FieldGrid image stack")
        self.observations_ = extract_observations(X, self.n_obs, self.fractions, seed=self.seed, radius=self.radius)
        self.n_features_in_ = X.ndim + 1
        self.result_ = run_pipeline(self.observations_, self._settings(self.n_features_in_), steps=self.steps)
        self.last_step_ = self.result_.steps[max(self.result_.steps)]
        self.summary_ = summarize_result(self.result_) if 3 in self.result_.steps else None
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} coordinates per point, got {X.shape[1]}")
        bma = bma_field(self.last_step_.layout, self.last_step_.samples, X)
        return (bma.mean, bma.std) if return_std else bma.mean

    def predict_concentration(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        if self.last_step_.step < 2:
            raise ValueError("the concentration network appears from step 2 on")
        return bma_field(self.last_step_.layout, self.last_step_.samples, X, which="conc").mean

    def da2_interval(self, level=0.95):
        check_is_fitted(self, "result_")
        if self.summary_ is None:
            raise ValueError("the Damkohler posterior needs all three steps")
        return self.summary_.da2_interval(level)
