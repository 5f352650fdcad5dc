"""Direct solver for the dimensionless diffusion-reaction dissolution model.

The latent acid concentration ``C`` and micro-porosity ``eps`` obey::

    C_t - Dm* div(eps^(1+beta) grad(C / eps)) = -Da2* C 1{eps < 1}
    eps_t = uC0 Da2* C 1{eps < 1}

with ``C = 1`` on the domain boundary.  Space is discretized with a
vertex-centred finite-volume stencil (nodes include the boundary) and
harmonic-mean face coefficients; time with implicit Euler plus fixed-point
iterations on the porosity coupling.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, GeometryError

__all__ = [
    "Geometry",
    "ModelConstants",
    "FieldGrid",
    "Core",
    "make_geometry_1d",
    "make_geometry_2d",
    "solve_dissolution",
    "emit_synthetic_uct",
    "upscaled_porosity",
    "write_field_binary",
    "read_field_binary",
    "write_field_csv",
    "EPS_FLOOR",
    "C_SOLID",
]

EPS_FLOOR = 0.05
C_SOLID = 1e-7
INDICATOR_TOL = 1e-12


@dataclass(frozen=True)
class ModelConstants:
    Da2_star: float
    Dm_star: float
    beta: float = 1.0
    upsilon_C0: float = 1.0
    c0: float = C_SOLID

    def __post_init__(self):
        if self.Da2_star < 0 or self.Dm_star <= 0 or self.beta <= 0 or self.upsilon_C0 <= 0 or self.c0 <= 0:
            raise ValueError("model constants must be positive (Da2* may be zero)")

    @property
    def Da2(self):
        return self.Da2_star / self.Dm_star

    @property
    def alpha(self):
        return 1.0 / self.Da2_star

    @property
    def gamma(self):
        return 1.0 / self.Dm_star


@dataclass
class Geometry:
    """Spatial grid, time grid and initial porosity.

    ``axes`` holds one 1-D coordinate array per spatial dimension (node
    positions including both boundary nodes).  ``eps0`` has shape equal to
    the spatial grid.
    """

    axes: tuple
    t_final: float
    nt: int
    eps0: np.ndarray
    eps_floor: float = EPS_FLOOR

    def __post_init__(self):
        self.eps0 = np.asarray(self.eps0, dtype=float)
        if self.eps0.shape != tuple(len(a) for a in self.axes):
            raise GeometryError("initial porosity does not match the grid")
        if self.nt < 2:
            raise GeometryError("need at least two time slices")
        if np.any(self.eps0 < self.eps_floor - 1e-15) or np.any(self.eps0 > 1.0):
            raise GeometryError("initial porosity must lie in [eps_floor, 1]")

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def shape(self):
        return self.eps0.shape

    @property
    def spacing(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def times(self):
        return np.linspace(0.0, self.t_final, self.nt)

    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for d in range(self.ndim):
            idx = [slice(None)] * self.ndim
            idx[d] = 0
            mask[tuple(idx)] = True
            idx[d] = -1
            mask[tuple(idx)] = True
        return mask


@dataclass
class FieldGrid:
    """Scalar field sampled on ``(time, *space)``."""

    values: np.ndarray
    axes: tuple
    times: np.ndarray
    name: str = "field"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (len(self.times),) + tuple(len(a) for a in self.axes)
        if self.values.shape != expected:
            raise ValueError(f"field shape {self.values.shape} does not match axes {expected}")

    @property
    def ndim(self):
        return len(self.axes)

    def points(self):
        """All grid points as rows ``(x[, y], t)`` in C order over (t, space)."""
        mesh = np.meshgrid(self.times, *self.axes, indexing="ij")
        coords = [m.ravel() for m in mesh[1:]] + [mesh[0].ravel()]
        return np.stack(coords, axis=1)


@dataclass(frozen=True)
class Core:
    """A 1D calcite core on ``[start, end]`` with plateau porosity ``eps``."""

    start: float
    end: float
    eps: float = EPS_FLOOR


def _ramp(dist, width):
    """Smooth weight: 1 inside (dist <= 0), 0 beyond ``width``."""
    if width <= 0:
        return (dist <= 0).astype(float)
    s = np.clip(dist / width, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


def make_geometry_1d(
    cores=(Core(0.4, 1.4, EPS_FLOOR), Core(1.8, 2.6, EPS_FLOOR)),
    extent=(0.0, 3.0),
    nx=200,
    nt=240,
    t_final=1.0,
    ramp=0.0,
    eps_floor=EPS_FLOOR,
):
    """Fluid background with rectangular porous cores.

    ``ramp`` > 0 smooths each core edge over that distance on the fluid side.
    """
    cores = sorted(cores, key=lambda c: c.start)
    for c in cores:
        if not (extent[0] <= c.start < c.end <= extent[1]):
            raise GeometryError(f"core {c} outside the domain")
        if c.eps < eps_floor or c.eps > 1:
            raise GeometryError(f"core porosity {c.eps} outside [eps_floor, 1]")
    for a, b in zip(cores[:-1], cores[1:]):
        if b.start < a.end + 2 * ramp:
            raise GeometryError(f"cores {a} and {b} overlap")
    x = np.linspace(extent[0], extent[1], nx)
    eps = np.ones(nx)
    for c in cores:
        dist = np.maximum(c.start - x, x - c.end)
        w = _ramp(dist, ramp)
        eps = np.minimum(eps, w * c.eps + (1.0 - w))
    return Geometry((x,), t_final, nt, eps, eps_floor)


def make_geometry_2d(
    radius=0.5,
    center=(1.0, 0.0),
    extent=((0.0, 2.0), (-1.0, 1.0)),
    shape=(100, 100),
    nt=350,
    t_final=1.0,
    apertures=((0.0, 0.35), (np.pi, 0.35)),
    aperture_depth=0.6,
    eps_outer=EPS_FLOOR,
    eps_inner=0.2,
    inner_radius=0.25,
    eps_floor=EPS_FLOOR,
):
    """Disk-shaped core with two wedge apertures and two porosity levels.

    ``apertures`` lists ``(angle, angular_width)`` pairs; voxels inside a
    wedge and farther than ``(1 - aperture_depth) * radius`` from the centre
    are fluid.  The core interior inside ``inner_radius`` has porosity
    ``eps_inner``, the rest ``eps_outer``.
    """
    if radius < 0 or inner_radius < 0:
        raise GeometryError("radii must be non-negative")
    x = np.linspace(*extent[0], shape[0])
    y = np.linspace(*extent[1], shape[1])
    xx, yy = np.meshgrid(x, y, indexing="ij")
    r = np.hypot(xx - center[0], yy - center[1])
    theta = np.arctan2(yy - center[1], xx - center[0])
    solid = r <= radius
    for ang, width in apertures:
        dtheta = np.angle(np.exp(1j * (theta - ang)))
        wedge = (np.abs(dtheta) <= width / 2) & (r > (1.0 - aperture_depth) * radius)
        solid &= ~wedge
    eps = np.ones(xx.shape)
    eps[solid] = eps_outer
    eps[solid & (r <= inner_radius)] = max(eps_inner, eps_floor)
    return Geometry((x, y), t_final, nt, eps, eps_floor)


def _control_volumes(axes):
    """Vertex-centred control volumes: interior nodes own ``h``, end nodes ``h / 2``."""
    w = np.ones(())
    for a in axes:
        a = np.asarray(a, dtype=float)
        h = np.empty_like(a)
        h[1:-1] = 0.5 * (a[2:] - a[:-2])
        h[0] = 0.5 * (a[1] - a[0])
        h[-1] = 0.5 * (a[-1] - a[-2])
        w = np.multiply.outer(w, h)
    return w


def upscaled_porosity(eps):
    """Domain-averaged porosity ``<eps>``, per time slice for a FieldGrid.

    A :class:`FieldGrid` or :class:`Geometry` is averaged with the
    finite-volume control volumes of its nodes; a bare array with a plain
    mean.
    """
    if isinstance(eps, Geometry):
        w = _control_volumes(eps.axes)
        return float(np.sum(w * eps.eps0) / w.sum())
    if isinstance(eps, FieldGrid):
        w = _control_volumes(eps.axes)
        vals = eps.values.reshape((eps.values.shape[0],) + w.shape)
        return np.tensordot(vals, w, axes=w.ndim) / w.sum()
    eps = np.asarray(eps)
    if eps.ndim == 1:
        return float(eps.mean())
    return eps.reshape(eps.shape[0], -1).mean(axis=1)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _diffusion_matrix(eps, beta, spacing, boundary):
    """Sparse matrix A with (A u)_i = sum_faces k_f (u_j/eps_j - u_i/eps_i) / h^2."""
    shape = eps.shape
    n = eps.size
    idx = np.arange(n).reshape(shape)
    kcell = eps ** (1.0 + beta)
    inv_eps = 1.0 / eps.ravel()
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for d, h in enumerate(spacing):
        lo = [slice(None)] * eps.ndim
        hi = [slice(None)] * eps.ndim
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        k = _harmonic(kcell[tuple(lo)], kcell[tuple(hi)]).ravel() / (h * h)
        i = idx[tuple(lo)].ravel()
        j = idx[tuple(hi)].ravel()
        for a, b in ((i, j), (j, i)):
            rows.append(a)
            cols.append(b)
            vals.append(k * inv_eps[b])
            np.add.at(diag, a, -k * inv_eps[a])
    rows = np.concatenate(rows + [np.arange(n)])
    cols = np.concatenate(cols + [np.arange(n)])
    vals = np.concatenate(vals + [diag])
    keep = ~boundary.ravel()[rows]
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def solve_dissolution(
    geometry,
    constants,
    substeps=1,
    tol=1e-10,
    max_iter=100,
    hold_conc=None,
    conc_init=None,
    check_bounds=True,
):
    """Integrate the dissolution model and return ``(eps, conc)`` FieldGrids.

    Parameters
    ----------
    geometry : Geometry
    constants : ModelConstants
    substeps : int
        Implicit Euler steps between consecutive stored time slices.
    tol, max_iter : float, int
        Fixed-point tolerance (max-norm change of eps) and iteration cap.
    hold_conc : float, optional
        Freeze C at this value everywhere (well-mixed limit, no transport).
    conc_init : ndarray, optional
        Initial interior concentration; defaults to ``c0`` in solid and 1 in fluid.
    """
    eps = geometry.eps0.copy()
    shape = geometry.shape
    boundary = geometry.boundary_mask()
    bflat = boundary.ravel()
    n = eps.size
    times = geometry.times
    dt = (times[1] - times[0]) / substeps
    Da, Dm, beta, uc = constants.Da2_star, constants.Dm_star, constants.beta, constants.upsilon_C0

    if hold_conc is not None:
        C = np.full(shape, float(hold_conc))
    elif conc_init is not None:
        C = np.asarray(conc_init, dtype=float).copy()
    else:
        C = np.where(eps < 1.0 - INDICATOR_TOL, constants.c0, 1.0)
    if hold_conc is None:
        C[boundary] = 1.0

    eps_out = np.empty((len(times),) + shape)
    c_out = np.empty_like(eps_out)
    eps_out[0], c_out[0] = eps, C
    eye = sp.identity(n, format="csr")
    bc_rhs = bflat.astype(float)
    bc_diag = sp.diags(bflat.astype(float))
    interior = sp.diags((~bflat).astype(float))
    step = 0
    for k in range(1, len(times)):
        for _ in range(substeps):
            step += 1
            chi = (eps < 1.0 - INDICATOR_TOL).astype(float)
            if hold_conc is not None:
                eps = np.minimum(1.0, eps + dt * uc * Da * C * chi)
                continue
            eps_new = eps.copy()
            react = sp.diags(Da * chi.ravel())
            for it in range(max_iter):
                A = _diffusion_matrix(eps_new, beta, geometry.spacing, boundary)
                M = interior @ (eye / dt - Dm * A + react) + bc_diag
                rhs = np.where(bflat, bc_rhs, C.ravel() / dt)
                C_new = spla.spsolve(M.tocsc(), rhs).reshape(shape)
                C_new[boundary] = 1.0
                eps_next = np.minimum(1.0, eps + dt * uc * Da * C_new * chi)
                change = np.max(np.abs(eps_next - eps_new))
                eps_new = eps_next
                if change <= tol:
                    break
            else:
                raise ConvergenceError(step)
            C = C_new
            eps = eps_new
            if check_bounds:
                _check_bounds(eps, C, geometry.eps_floor, step)
                C = np.clip(C, 0.0, 1.0)
        eps_out[k], c_out[k] = eps, C
    return (
        FieldGrid(eps_out, geometry.axes, times, "eps"),
        FieldGrid(c_out, geometry.axes, times, "conc"),
    )


def _check_bounds(eps, C, floor, step, slack=1e-9):
    if eps.min() < floor - slack or eps.max() > 1.0 + slack:
        raise AssertionError(f"porosity left [{floor}, 1] at step {step}")
    if C.min() < -slack or C.max() > 1.0 + slack:
        raise AssertionError(f"concentration left [0, 1] at step {step}")


def emit_synthetic_uct(eps, sigma=0.03, seed=0):
    """Synthetic micro-CT stack ``clip(1 - eps + noise, 0, 1)``."""
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=eps.values.shape) if sigma > 0 else 0.0
    img = np.clip(1.0 - eps.values + noise, 0.0, 1.0)
    return FieldGrid(img, eps.axes, eps.times, "image")


# ---------------------------------------------------------------- file formats


def write_field_binary(path, field):
    """Flat little-endian float64 stack plus ``<path>.json`` describing it."""
    path = Path(path)
    np.ascontiguousarray(field.values, dtype="<f8").tofile(path)
    meta = {
        "name": field.name,
        "shape": list(field.values.shape),
        "order": "C",
        "dtype": "float64-le",
        "dims": ["t"] + ["x", "y", "z"][: field.ndim],
        "times": field.times.tolist(),
        "axes": [a.tolist() for a in field.axes],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def read_field_binary(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.fromfile(path, dtype="<f8").reshape(meta["shape"])
    return FieldGrid(values, tuple(np.array(a) for a in meta["axes"]), np.array(meta["times"]), meta["name"])


def write_field_csv(directory, field):
    """One CSV per time slice: coordinate columns then the value column."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = ["x", "y", "z"][: field.ndim]
    mesh = np.meshgrid(*field.axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    width = len(str(len(field.times) - 1))
    paths = []
    for k, t in enumerate(field.times):
        p = directory / f"{field.name}_{k:0{width}d}.csv"
        data = np.column_stack([coords, np.full(coords.shape[0], t), field.values[k].ravel()])
        np.savetxt(p, data, delimiter=",", header=",".join(names + ["t", field.name]), comments="", fmt="%.17g")
        paths.append(p)
    return paths


def constants_dict(constants):
    d = asdict(constants)
    d["Da2"] = constants.Da2
    return d
