"""Bayesian inference of dissolution parameters from dynamical micro-CT stacks."""

__version__ = "0.1.0"

from .awhmc import ChainRecord, SamplerConfig, adapt_weights, leapfrog, sample
from .dns import FieldGrid, Geometry, ModelConstants, emit_synthetic_uct, make_geometry_1d, make_geometry_2d, solve_dissolution
from .imaging import ObservationSet, Region, extract_observations
from .pipeline import InferenceSettings, posterior_summary, run_pipeline
from .potentials import PotentialSpec, TaskKind, build_potential, grad_potential
from .surrogate import NetworkSpec, ParamLayout, init_params

__all__ = [
    "ChainRecord",
    "FieldGrid",
    "Geometry",
    "InferenceSettings",
    "ModelConstants",
    "NetworkSpec",
    "ObservationSet",
    "ParamLayout",
    "PotentialSpec",
    "Region",
    "SamplerConfig",
    "TaskKind",
    "adapt_weights",
    "build_potential",
    "emit_synthetic_uct",
    "extract_observations",
    "grad_potential",
    "init_params",
    "leapfrog",
    "make_geometry_1d",
    "make_geometry_2d",
    "posterior_summary",
    "run_pipeline",
    "sample",
    "solve_dissolution",
]
