"""Run configuration: defaults, TOML round-trip and validation."""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import toml

from .awhmc import SamplerConfig
from .dns import EPS_FLOOR, C_SOLID, Core, ModelConstants, make_geometry_1d, make_geometry_2d
from .errors import ConfigError
from .imaging import DEFAULT_FRACTIONS_1D, DEFAULT_FRACTIONS_2D
from .pipeline import TABLE_1D, TABLE_2D, InferenceSettings
from .surrogate import NetworkSpec

__all__ = ["RunConfig", "default_config", "load_config", "dump_config", "save_config", "reference_diffusivity"]

MODES = ("generate", "infer", "benchmark", "diagnose")


def reference_diffusivity(t_final_phys, length, t_final_star=1.0):
    """``D_ref = T_f* L^2 / T_f`` in m^2/s."""
    return t_final_star * length**2 / t_final_phys


@dataclass
class GeometryConfig:
    nx: int = 200
    ny: int = 100
    nt: int = 240
    t_final: float = 1.0
    extent: list = field(default_factory=lambda: [0.0, 3.0])
    cores: list = field(default_factory=lambda: [[0.4, 1.4, EPS_FLOOR], [1.8, 2.6, EPS_FLOOR]])
    ramp: float = 0.0
    radius: float = 0.5
    eps_inner: float = 0.2
    inner_radius: float = 0.25
    eps_floor: float = EPS_FLOOR


@dataclass
class ConstantsConfig:
    Da2_star: float = 21.3912
    Dm_star: float = 2.4
    beta: float = 1.0
    upsilon_C0: float = 1.0
    c0: float = C_SOLID
    # physical scales used only for the manifest
    length_m: float = 1e-4
    t_final_s: float = 24.0


@dataclass
class ImagingConfig:
    n_obs: int = 7725
    noise: float = 0.03
    radius_space: int = 2
    radius_time: int = 1
    fractions: dict = field(default_factory=lambda: dict(DEFAULT_FRACTIONS_1D))


@dataclass
class SamplerSection:
    n_samples: int = 200
    n_leapfrog: int = 200
    n_adapt: list = field(default_factory=lambda: [n for n, _ in TABLE_1D])
    dt: list = field(default_factory=lambda: [d for _, d in TABLE_1D])


@dataclass
class InferenceConfig:
    task_sigma: float = 0.01
    percentile: float = 80.0
    hidden_eps: int = 4
    hidden_conc: int = 3
    width: int = 32


@dataclass
class RunConfig:
    mode: str = "infer"
    dim: int = 1
    seed: int = 0
    out: str = "run"
    steps: list = field(default_factory=lambda: [1, 2, 3])
    chains: int = 1
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    constants: ConstantsConfig = field(default_factory=ConstantsConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.dim not in (1, 2):
            raise ConfigError("dim must be 1 or 2")
        if sorted(self.steps) not in ([1], [1, 2], [1, 2, 3]):
            raise ConfigError("steps must be a prefix of 1,2,3")
        if self.chains < 1:
            raise ConfigError("chains must be positive")
        c = self.constants
        if min(c.Da2_star, c.Dm_star, c.beta, c.upsilon_C0, c.c0) < 0 or c.Dm_star == 0:
            raise ConfigError("model constants must be positive")
        g = self.geometry
        if min(g.nx, g.nt) < 2 or (self.dim == 2 and g.ny < 2):
            raise ConfigError("grids need at least two nodes per axis")
        s = self.sampler
        if len(s.n_adapt) != 3 or len(s.dt) != 3:
            raise ConfigError("sampler.n_adapt and sampler.dt need one entry per step")
        try:
            self.sampler_configs()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        im = self.imaging
        if im.noise < 0 or im.n_obs < 1:
            raise ConfigError("imaging.noise must be >= 0 and imaging.n_obs >= 1")
        if sum(im.fractions.values()) > 1 + 1e-9:
            raise ConfigError("region fractions sum above 1")
        if self.inference.task_sigma <= 0 or not 0 < self.inference.percentile <= 100:
            raise ConfigError("inference.task_sigma must be > 0 and percentile in (0, 100]")
        return self

    # ---- builders

    def model_constants(self):
        c = self.constants
        return ModelConstants(c.Da2_star, c.Dm_star, c.beta, c.upsilon_C0, c.c0)

    def make_geometry(self):
        g = self.geometry
        if self.dim == 1:
            cores = tuple(Core(*c) for c in g.cores)
            return make_geometry_1d(cores, tuple(g.extent), g.nx, g.nt, g.t_final, g.ramp, g.eps_floor)
        return make_geometry_2d(
            radius=g.radius,
            shape=(g.nx, g.ny),
            nt=g.nt,
            t_final=g.t_final,
            eps_inner=g.eps_inner,
            inner_radius=g.inner_radius,
            eps_floor=g.eps_floor,
        )

    def sampler_configs(self):
        s = self.sampler
        return tuple(
            SamplerConfig(n, s.n_samples, s.n_leapfrog, dt, seed=self.seed + 101 * k)
            for k, (n, dt) in enumerate(zip(s.n_adapt, s.dt))
        )

    def inference_settings(self):
        inf = self.inference
        c = self.constants
        return InferenceSettings(
            beta=c.beta,
            upsilon_C0=c.upsilon_C0,
            c0=c.c0,
            task_sigma=inf.task_sigma,
            eps_spec=NetworkSpec(self.dim + 1, inf.hidden_eps, inf.width),
            conc_spec=NetworkSpec(self.dim + 1, inf.hidden_conc, inf.width),
            samplers=self.sampler_configs(),
            percentile=inf.percentile,
            seed=self.seed,
        )

    def d_ref(self):
        return reference_diffusivity(self.constants.t_final_s, self.constants.length_m, self.geometry.t_final)


def default_config(dim=1, beta=None, fast=False, **top):
    """Documented defaults for the 1D or 2D problem (``beta`` defaults to 1 in 1D, 0.5 in 2D)."""
    if beta is None:
        beta = 1.0 if dim == 1 else 0.5
    if dim == 1:
        cfg = RunConfig(dim=1, constants=ConstantsConfig(beta=beta))
    else:
        cfg = RunConfig(
            dim=2,
            geometry=GeometryConfig(nx=100, ny=100, nt=350, extent=[0.0, 2.0], cores=[]),
            constants=ConstantsConfig(
                Da2_star=155.9775, Dm_star=17.5, beta=beta, upsilon_C0=0.03693, t_final_s=175.0
            ),
            imaging=ImagingConfig(n_obs=15907, fractions=dict(DEFAULT_FRACTIONS_2D)),
            sampler=SamplerSection(
                n_leapfrog=150, n_adapt=[n for n, _ in TABLE_2D], dt=[d for _, d in TABLE_2D]
            ),
        )
    if fast:
        cfg.sampler.n_samples = 60
        cfg.sampler.n_leapfrog = 50
    for k, v in top.items():
        setattr(cfg, k, v)
    return cfg


_SECTIONS = {
    "geometry": GeometryConfig,
    "constants": ConstantsConfig,
    "imaging": ImagingConfig,
    "sampler": SamplerSection,
    "inference": InferenceConfig,
}


def _from_dict(doc):
    top = {}
    sections = {}
    known = {f.name for f in fields(RunConfig)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            allowed = {f.name for f in fields(_SECTIONS[key])}
            extra = set(value) - allowed
            if extra:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(extra)}")
            sections[key] = value
        else:
            top[key] = value
    try:
        base = default_config(dim=int(top.get("dim", 1)), beta=sections.get("constants", {}).get("beta", None))
        for key, value in sections.items():
            setattr(base, key, replace(getattr(base, key), **value))
        for key, value in top.items():
            setattr(base, key, value)
        return base.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value type in config: {exc}") from None


def load_config(path):
    """Parse a TOML run configuration; missing keys take their defaults."""
    try:
        doc = toml.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return _from_dict(doc)


def loads_config(text):
    try:
        return _from_dict(toml.loads(text))
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None


def dump_config(cfg):
    return toml.dumps(asdict(cfg))


def save_config(cfg, path):
    Path(path).write_text(dump_config(cfg))
