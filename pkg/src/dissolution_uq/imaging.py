"""Training-point extraction and region decomposition from a micro-CT stack."""

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .dns import FieldGrid
from .errors import EmptyRegionError, RegionQuotaError

__all__ = [
    "Region",
    "ObservationSet",
    "DEFAULT_FRACTIONS_1D",
    "DEFAULT_FRACTIONS_2D",
    "normalize_stack",
    "detect_rai",
    "dilate_rai_plus",
    "label_voxels",
    "extract_observations",
    "restrict_rai_minus",
    "write_observations_csv",
    "read_observations_csv",
]


class Region(IntEnum):
    SOLID = 0
    FLUID = 1
    BOUNDARY = 2
    RAI = 3
    RAI_PLUS_EXTRA = 4


# Fractions of N_obs in the order solid, fluid, RAI, RAI+ extra, RAI-, boundary.
DEFAULT_FRACTIONS_1D = {"solid": 0.50, "fluid": 0.04, "rai": 0.15, "rai_plus": 0.13, "rai_minus": 0.10, "boundary": 0.08}
DEFAULT_FRACTIONS_2D = {"solid": 0.155, "fluid": 0.005, "rai": 0.48, "rai_plus": 0.11, "rai_minus": 0.20, "boundary": 0.05}

_FRACTION_REGION = {
    "solid": Region.SOLID,
    "fluid": Region.FLUID,
    "boundary": Region.BOUNDARY,
    "rai": Region.RAI,
    "rai_plus": Region.RAI_PLUS_EXTRA,
}


@dataclass
class ObservationSet:
    """Sampled space-time points with intensities and region labels.

    ``points`` rows are ``(x[, y], t)``.  ``voxels`` holds the flat index of
    each point in the ``(t, *space)`` image grid.  ``rai_minus`` is a boolean
    mask over the points, filled in after step 2.
    """

    points: np.ndarray
    intensities: np.ndarray
    labels: np.ndarray
    voxels: np.ndarray = None
    rai_minus: np.ndarray = None
    rai_minus_quota: int = None

    def __post_init__(self):
        n = self.points.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.voxels is None:
            self.voxels = np.full(n, -1, dtype=np.int64)
        if self.rai_minus is None:
            self.rai_minus = np.zeros(n, dtype=bool)
        if not (self.intensities.shape == (n,) == self.labels.shape == self.rai_minus.shape):
            raise ValueError("observation arrays disagree in length")

    def __len__(self):
        return self.points.shape[0]

    @property
    def ndim(self):
        return self.points.shape[1] - 1

    def mask(self, *regions):
        return np.isin(self.labels, [int(r) for r in regions])

    def subset(self, *regions):
        return self.points[self.mask(*regions)]

    def counts(self):
        return {r.name: int(np.sum(self.labels == r)) for r in Region}

    def check_partition(self):
        valid = np.isin(self.labels, [int(r) for r in Region])
        if not valid.all():
            raise AssertionError("points with unknown region label")
        if np.any(self.rai_minus & (self.labels != Region.RAI)):
            raise AssertionError("RAI- points must belong to the RAI")
        return True


def normalize_stack(image):
    """Min-max normalize intensities over the whole stack."""
    values = image.values if isinstance(image, FieldGrid) else np.asarray(image, dtype=float)
    lo, hi = values.min(), values.max()
    out = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    if isinstance(image, FieldGrid):
        return FieldGrid(out, image.axes, image.times, image.name)
    return out


def detect_rai(image, low=0.1, high=0.9):
    """Voxels whose intensity drops at the next time slice and lies in ``(low, high)``.

    The stack is indexed ``(t, *space)``; the last slice is never marked.
    """
    im = image.values if isinstance(image, FieldGrid) else np.asarray(image, dtype=float)
    if im.shape[0] < 2:
        raise ValueError("need at least two time slices")
    mask = np.zeros(im.shape, dtype=bool)
    cur = im[:-1]
    mask[:-1] = (im[1:] < cur) & (cur > low) & (cur < high)
    return mask


def _radii(radius, ndim_space):
    if np.ndim(radius) == 0:
        r = int(radius)
        return (r,) * (ndim_space + 1)
    r_space, r_time = radius
    return (int(r_time),) + (int(r_space),) * ndim_space


def dilate_rai_plus(rai, image, radius=(2, 1), fluid_threshold=0.5):
    """RAI plus fluid voxels within a Chebyshev box of the RAI.

    ``radius`` is either one integer for all axes or ``(space, time)``.
    Fluid means normalized intensity below ``fluid_threshold``.
    """
    im = image.values if isinstance(image, FieldGrid) else np.asarray(image, dtype=float)
    rai = np.asarray(rai, dtype=bool)
    radii = _radii(radius, rai.ndim - 1)
    if all(r == 0 for r in radii):
        return rai.copy()
    size = tuple(2 * r + 1 for r in radii)
    near = maximum_filter(rai.astype(np.uint8), size=size, mode="constant", cval=0).astype(bool)
    return rai | (near & (im < fluid_threshold))


def label_voxels(image, radius=(2, 1), low=0.1, high=0.9, fluid_threshold=0.5):
    """Region label of every voxel of a normalized stack.

    Precedence: RAI, then spatial boundary, then fluid RAI+ neighbourhood,
    then solid / fluid by intensity threshold.
    """
    im = image.values if isinstance(image, FieldGrid) else np.asarray(image, dtype=float)
    rai = detect_rai(im, low, high)
    plus = dilate_rai_plus(rai, im, radius, fluid_threshold)
    labels = np.where(im < fluid_threshold, Region.FLUID, Region.SOLID).astype(np.int8)
    labels[plus & ~rai] = Region.RAI_PLUS_EXTRA
    boundary = np.zeros(im.shape[1:], dtype=bool)
    for d in range(boundary.ndim):
        idx = [slice(None)] * boundary.ndim
        idx[d] = 0
        boundary[tuple(idx)] = True
        idx[d] = -1
        boundary[tuple(idx)] = True
    labels[:, boundary] = Region.BOUNDARY
    labels[rai] = Region.RAI
    return labels


def region_quotas(n_obs, fractions):
    """Per-region point counts ``round(f * n_obs)``; RAI- is returned separately."""
    total = sum(fractions.values())
    if total > 1.0 + 1e-9:
        raise ValueError(f"region fractions sum to {total} > 1")
    quotas = {_FRACTION_REGION[k]: int(round(v * n_obs)) for k, v in fractions.items() if k in _FRACTION_REGION}
    return quotas, int(round(fractions.get("rai_minus", 0.0) * n_obs))


def extract_observations(image, n_obs, fractions=None, seed=0, radius=(2, 1), normalize=True):
    """Stratified random sample of training points from an image stack.

    Each region receives ``round(f * n_obs)`` points drawn without
    replacement.  The RAI- fraction is kept as a cap applied once RAI- is
    known after step 2.
    """
    if fractions is None:
        fractions = DEFAULT_FRACTIONS_1D if image.ndim == 1 else DEFAULT_FRACTIONS_2D
    if n_obs > image.values.size:
        raise ValueError("more observations requested than voxels")
    norm = normalize_stack(image) if normalize else image
    labels = label_voxels(norm, radius)
    quotas, rai_minus_quota = region_quotas(n_obs, fractions)
    rng = np.random.default_rng(seed)
    flat_labels = labels.ravel()
    chosen = []
    jitter = []
    dt = float(norm.times[1] - norm.times[0])
    for region in Region:
        want = quotas.get(region, 0)
        if want == 0:
            continue
        candidates = np.flatnonzero(flat_labels == region)
        if region == Region.BOUNDARY and 0 < candidates.size < want:
            # The boundary condition holds at every instant, so boundary
            # points may share a voxel and differ by a sub-slice time shift.
            picks = np.sort(rng.choice(candidates, size=want, replace=True))
            chosen.append(picks)
            jitter.append(rng.uniform(-0.5, 0.5, size=want) * dt)
            continue
        if candidates.size < want:
            raise RegionQuotaError(region.name, candidates.size, want)
        chosen.append(np.sort(rng.choice(candidates, size=want, replace=False)))
        jitter.append(np.zeros(want))
    voxels = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    points = norm.points()[voxels]
    if jitter:
        points[:, -1] = np.clip(points[:, -1] + np.concatenate(jitter), norm.times[0], norm.times[-1])
    return ObservationSet(
        points=points,
        intensities=norm.values.ravel()[voxels],
        labels=flat_labels[voxels],
        voxels=voxels,
        rai_minus_quota=rai_minus_quota or None,
    )


def restrict_rai_minus(obs, positive, quota=None, seed=0):
    """Set ``obs.rai_minus`` to the RAI points flagged positive.

    ``positive`` is a boolean array over the RAI points (in the order of
    ``obs.subset(Region.RAI)``).  When ``quota`` (default: the set's stored
    RAI- quota) is smaller than the positive count, a seeded random subset of
    that size is kept.
    """
    rai_idx = np.flatnonzero(obs.labels == Region.RAI)
    positive = np.asarray(positive, dtype=bool)
    if positive.shape != rai_idx.shape:
        raise ValueError("positivity flags must cover every RAI point")
    keep = rai_idx[positive]
    if keep.size == 0:
        raise EmptyRegionError("RAI_MINUS", "no RAI point has a positive diffusion estimate")
    quota = obs.rai_minus_quota if quota is None else quota
    if quota is not None and keep.size > quota:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(keep, size=quota, replace=False))
    mask = np.zeros(len(obs), dtype=bool)
    mask[keep] = True
    obs.rai_minus = mask
    return mask


def write_observations_csv(path, obs):
    names = ["x", "y", "z"][: obs.ndim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["t", "intensity", "region", "rai_minus", "voxel"])
        for p, im, lab, rm, vx in zip(obs.points, obs.intensities, obs.labels, obs.rai_minus, obs.voxels):
            w.writerow([repr(float(v)) for v in p] + [repr(float(im)), Region(lab).name, int(rm), int(vx)])


def read_observations_csv(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ncoord = header.index("intensity")
    pts = np.array([[float(v) for v in r[:ncoord]] for r in body]).reshape(-1, ncoord)
    return ObservationSet(
        points=pts,
        intensities=np.array([float(r[ncoord]) for r in body]),
        labels=np.array([Region[r[ncoord + 1]] for r in body], dtype=np.int8),
        voxels=np.array([int(r[ncoord + 3]) for r in body], dtype=np.int64),
        rai_minus=np.array([bool(int(r[ncoord + 2])) for r in body], dtype=bool),
    )
