"""Surrogate networks for micro-porosity and concentration, and their joint parameter vector."""

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import mlp_jet
from .errors import DimensionError

__all__ = [
    "NetworkSpec",
    "ParamLayout",
    "default_specs",
    "init_params",
    "log_prior",
    "predict_eps",
    "predict_conc",
    "rect_tanh",
    "to_log",
    "from_log",
    "save_params",
    "load_params",
    "SIGMA_THETA",
]

SIGMA_THETA = 10.0
_MAGIC = b"DUQP"
_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: int
    width: int = 32
    output_activation: str = "tanh_rect"

    def __post_init__(self):
        if self.input_dim not in (2, 3):
            raise DimensionError("input_dim must be 2 (x, t) or 3 (x, y, t)")
        if self.hidden_layers < 1 or self.width < 1:
            raise ValueError("network needs at least one hidden layer of positive width")
        if self.output_activation not in ("tanh_rect", "linear"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def sizes(self):
        return (self.input_dim,) + (self.width,) * self.hidden_layers + (1,)

    @property
    def n_params(self):
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def default_specs(input_dim=2):
    """Default (ε-network, C-network) pair."""
    return NetworkSpec(input_dim, 4), NetworkSpec(input_dim, 3)


@dataclass(frozen=True)
class ParamLayout:
    """Positions of each block inside the flat parameter vector.

    Step 1 holds the ε-network only.  Step 2 appends the C-network and
    ``log α``; step 3 adds ``log γ`` at the end.
    """

    eps_spec: NetworkSpec
    conc_spec: NetworkSpec
    step: int

    def __post_init__(self):
        if self.step not in (1, 2, 3):
            raise ValueError("step must be 1, 2 or 3")
        if self.eps_spec.input_dim != self.conc_spec.input_dim:
            raise DimensionError("both networks must share the input dimension")

    @property
    def has_conc(self):
        return self.step >= 2

    @property
    def eps_slice(self):
        return slice(0, self.eps_spec.n_params)

    @property
    def conc_slice(self):
        if not self.has_conc:
            return None
        a = self.eps_spec.n_params
        return slice(a, a + self.conc_spec.n_params)

    @property
    def n_network(self):
        return self.eps_spec.n_params + (self.conc_spec.n_params if self.has_conc else 0)

    @property
    def n_inverse(self):
        return self.step - 1

    @property
    def size(self):
        return self.n_network + self.n_inverse

    @property
    def alpha_index(self):
        return self.n_network if self.has_conc else None

    @property
    def gamma_index(self):
        return self.n_network + 1 if self.step == 3 else None

    def alpha(self, theta):
        return float(np.exp(theta[self.alpha_index]))

    def gamma(self, theta):
        return float(np.exp(theta[self.gamma_index]))

    def check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DimensionError(f"parameter vector has shape {theta.shape}, layout expects ({self.size},)")
        return theta


def _init_network(spec, rng):
    parts = []
    s = spec.sizes
    for fin, fout in zip(s[:-1], s[1:]):
        parts.append(rng.normal(0.0, 1.0 / np.sqrt(fin), size=fin * fout))
        parts.append(rng.normal(0.0, 1.0 / np.sqrt(fin), size=fout))
    return np.concatenate(parts)


def init_params(layout, seed, log_gamma=0.0):
    """Random chain start: N(0, 1/fan_in) weights, zero log inverse parameters."""
    rng = np.random.default_rng(seed)
    parts = [_init_network(layout.eps_spec, rng)]
    if layout.has_conc:
        parts.append(_init_network(layout.conc_spec, rng))
        parts.append(np.array([0.0, float(log_gamma)])[: layout.n_inverse])
    return np.concatenate(parts)


def extend_params(theta_prev, prev_layout, layout, seed, log_gamma=0.0):
    """Warm-start a larger layout from a previous step's vector.

    Blocks present in both layouts are copied; new blocks are initialized as
    in :func:`init_params`.
    """
    out = init_params(layout, seed, log_gamma=log_gamma)
    out[layout.eps_slice] = theta_prev[prev_layout.eps_slice]
    if prev_layout.has_conc and layout.has_conc:
        out[layout.conc_slice] = theta_prev[prev_layout.conc_slice]
        out[layout.alpha_index] = theta_prev[prev_layout.alpha_index]
    return out


def log_prior(theta, sigma=SIGMA_THETA):
    """Negative log Gaussian prior up to a constant: ``|θ|² / (2σ²)``."""
    theta = np.asarray(theta, dtype=float)
    return float(theta @ theta) / (2.0 * sigma * sigma)


def grad_log_prior(theta, sigma=SIGMA_THETA):
    return np.asarray(theta, dtype=float) / (sigma * sigma)


def rect_tanh(a):
    return 0.5 * (np.tanh(a) + 1.0)


def to_log(x):
    return np.log(x)


def from_log(x):
    return np.exp(x)


def _spatial_axes(spec):
    return tuple(range(spec.input_dim - 1))


def _derivs(spec, time_derivative, spatial):
    t_axis = spec.input_dim - 1
    d_axes, dd_axes = [], []
    if spatial:
        d_axes += list(_spatial_axes(spec))
        dd_axes += list(_spatial_axes(spec))
    if time_derivative:
        d_axes.append(t_axis)
    return tuple(d_axes), tuple(dd_axes)


def predict_eps(layout, theta, points, time_derivative=False, spatial=False, keep=False):
    """ε-network prediction with optional ∂/∂t and spatial first/second derivatives."""
    theta = layout.check(theta)
    d_axes, dd_axes = _derivs(layout.eps_spec, time_derivative, spatial)
    return mlp_jet(
        theta[layout.eps_slice],
        layout.eps_spec.sizes,
        points,
        d_axes,
        dd_axes,
        layout.eps_spec.output_activation,
        keep=keep,
    )


def predict_conc(layout, theta, points, time_derivative=False, spatial=False, keep=False):
    """C-network prediction; requires a step-2 or step-3 layout."""
    theta = layout.check(theta)
    if not layout.has_conc:
        raise DimensionError("step-1 parameter vectors carry no concentration network")
    d_axes, dd_axes = _derivs(layout.conc_spec, time_derivative, spatial)
    return mlp_jet(
        theta[layout.conc_slice],
        layout.conc_spec.sizes,
        points,
        d_axes,
        dd_axes,
        layout.conc_spec.output_activation,
        keep=keep,
    )


def save_params(path, theta):
    """Write a flat float64 vector behind a 16-byte header (magic, version, length)."""
    theta = np.ascontiguousarray(theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", _MAGIC, _VERSION, theta.shape[0]))
        fh.write(theta.tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated header")
        magic, version, n = struct.unpack("<4sIQ", header)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError(f"{path}: not a parameter checkpoint")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.shape[0] != n:
        raise ValueError(f"{path}: expected {n} values, found {data.shape[0]}")
    return data.astype(float)
