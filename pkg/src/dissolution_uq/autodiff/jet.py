"""Batched Taylor-mode evaluation of tanh MLPs with a hand-written reverse pass.

A :class:`DualBatch` carries, for every point of a batch, the network value,
its first derivatives along selected input axes and its pure second
derivatives along selected (spatial) axes.  The forward pass pushes all of
these slots through the network in one stacked matrix product per layer.
:func:`mlp_jet_vjp` then pulls cotangents on every slot back to the flat
weight vector, which is the forward-over-reverse scheme used by the
potentials.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError

__all__ = ["DualBatch", "JetCache", "mlp_jet", "mlp_jet_vjp", "unpack_layers"]


@dataclass
class DualBatch:
    """Network output plus input derivatives on a batch of points.

    ``d[a]`` is the first derivative along input axis ``a`` and ``dd[a]`` the
    pure second derivative along ``a``.  All arrays have shape ``(n,)``.
    """

    value: np.ndarray
    d: dict = field(default_factory=dict)
    dd: dict = field(default_factory=dict)

    def __len__(self):
        return self.value.shape[0]

    def check(self):
        n = self.value.shape[0]
        for arr in list(self.d.values()) + list(self.dd.values()):
            if arr.shape != (n,):
                raise DimensionError("derivative slot length differs from value length")
        return self

    def laplacian(self, axes=None):
        axes = sorted(self.dd) if axes is None else axes
        out = np.zeros_like(self.value)
        for a in axes:
            out = out + self.dd[a]
        return out


def unpack_layers(theta, sizes):
    """Split a flat weight vector into ``[(W, b), ...]`` views.

    ``sizes`` lists layer widths from input to output, e.g. ``(2, 32, 1)``.
    Each weight matrix has shape ``(fan_in, fan_out)``.
    """
    need = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if theta.shape[0] != need:
        raise DimensionError(f"weight vector has {theta.shape[0]} entries, layout needs {need}")
    layers = []
    k = 0
    for fin, fout in zip(sizes[:-1], sizes[1:]):
        w = theta[k : k + fin * fout].reshape(fin, fout)
        k += fin * fout
        b = theta[k : k + fout]
        k += fout
        layers.append((w, b))
    return layers


class JetCache:
    """Intermediate activations kept by :func:`mlp_jet` for the reverse pass."""

    def __init__(self, sizes, d_axes, dd_axes, n, output):
        self.sizes = sizes
        self.d_axes = d_axes
        self.dd_axes = dd_axes
        self.n = n
        self.output = output
        self.inputs = None
        self.stacks = []  # stacked layer inputs Z (k*n, fan_in) for hidden->next
        self.acts = []  # per tanh layer: (z, a_d list, a_dd list)


def _tanh_jet_into(stack, n, a, a_d, a_dd, dd_index):
    """Write the tanh jet of ``(a, a_d, a_dd)`` into the row blocks of ``stack``.

    Block 0 receives the value, blocks ``1..nd`` the first derivatives and
    the remaining blocks the second derivatives.  ``a_dd`` entries may be
    None (exact zeros, as in the first layer).  Returns ``(z, s)``.
    """
    nd = len(a_d)
    z = stack[:n]
    np.tanh(a, out=z)
    s = z * z
    np.subtract(1.0, s, out=s)
    for i, ad in enumerate(a_d):
        np.multiply(s, ad, out=stack[(1 + i) * n : (2 + i) * n])
    if dd_index:
        zs2 = z * s
        zs2 *= 2.0
        tmp = np.empty_like(s)
        for j, i in enumerate(dd_index):
            out = stack[(1 + nd + j) * n : (2 + nd + j) * n]
            np.multiply(a_d[i], a_d[i], out=tmp)
            tmp *= zs2
            if a_dd[j] is None:
                np.negative(tmp, out=out)
            else:
                np.multiply(s, a_dd[j], out=out)
                out -= tmp
    return z, s


def _tanh_jet_vjp(z, s, a_d, a_dd, dd_index, gz, gz_d, gz_dd):
    """Reverse of :func:`_tanh_jet_into`; returns cotangents on a, a_d, a_dd."""
    zs = z * s
    ga = gz * s
    ga_d = []
    for ad, gzd in zip(a_d, gz_d):
        ga -= 2.0 * zs * gzd * ad
        ga_d.append(s * gzd)
    ga_dd = []
    if dd_index:
        curv = s * (1.0 - 3.0 * z * z)
        for j, i in enumerate(dd_index):
            ad, add, gzdd = a_d[i], a_dd[j], gz_dd[j]
            term = curv * ad * ad
            if add is not None:
                term = term + zs * add
            ga -= 2.0 * gzdd * term
            ga_d[i] = ga_d[i] - 4.0 * zs * ad * gzdd
            ga_dd.append(s * gzdd)
    return ga, ga_d, ga_dd


def mlp_jet(theta, sizes, x, d_axes=(), dd_axes=(), output="tanh_rect", keep=False):
    """Evaluate a tanh MLP with input derivatives.

    Parameters
    ----------
    theta : ndarray
        Flat weights laid out as consecutive ``(W, b)`` blocks.
    sizes : tuple of int
        Layer widths, input dimension first, output dimension (1) last.
    x : ndarray of shape (n, sizes[0])
        Evaluation points.
    d_axes : sequence of int
        Input axes for first derivatives.
    dd_axes : sequence of int
        Input axes for pure second derivatives; each must be in ``d_axes``.
    output : {"tanh_rect", "linear"}
        Output activation, ``0.5 * (tanh + 1)`` or identity.
    keep : bool
        Also return a :class:`JetCache` for :func:`mlp_jet_vjp`.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != sizes[0]:
        raise DimensionError(f"expected points of dimension {sizes[0]}, got shape {x.shape}")
    d_axes = tuple(d_axes)
    dd_axes = tuple(dd_axes)
    for a in d_axes:
        if not 0 <= a < sizes[0]:
            raise DimensionError(f"derivative axis {a} out of range")
    if output not in ("tanh_rect", "linear"):
        raise ValueError(f"unknown output activation {output!r}")
    for a in dd_axes:
        if a not in d_axes:
            raise DimensionError("second-derivative axes need first derivatives too")
    dd_index = [d_axes.index(a) for a in dd_axes]
    layers = unpack_layers(theta, sizes)
    n = x.shape[0]
    nd, ndd = len(d_axes), len(dd_axes)
    k = 1 + nd + ndd
    cache = JetCache(sizes, d_axes, dd_axes, n, output) if keep else None
    if keep:
        cache.inputs = x

    w0, b0 = layers[0]
    a = x @ w0
    a += b0
    a_d = [np.broadcast_to(w0[ax], a.shape) for ax in d_axes]
    a_dd = [None] * ndd
    for w, b in layers[1:]:
        stack = np.empty((k * n, a.shape[1]))
        z, s = _tanh_jet_into(stack, n, a, a_d, a_dd, dd_index)
        if keep:
            cache.acts.append((z, s, a_d, a_dd))
            cache.stacks.append(stack)
        out = stack @ w
        a = out[:n]
        a += b
        a_d = [out[(1 + i) * n : (2 + i) * n] for i in range(nd)]
        a_dd = [out[(1 + nd + i) * n : (2 + nd + i) * n] for i in range(ndd)]

    if output == "tanh_rect":
        stack = np.empty((k * n, a.shape[1]))
        z, s = _tanh_jet_into(stack, n, a, a_d, a_dd, dd_index)
        if keep:
            cache.acts.append((z, s, a_d, a_dd))
        half = 0.5 * stack[:, 0]
        value = half[:n] + 0.5
        y_d = [half[(1 + i) * n : (2 + i) * n] for i in range(nd)]
        y_dd = [half[(1 + nd + i) * n : (2 + nd + i) * n] for i in range(ndd)]
    else:
        value = a[:, 0]
        y_d = [np.broadcast_to(v, a.shape)[:, 0] for v in a_d]
        y_dd = [v[:, 0] if v is not None else np.zeros(n) for v in a_dd]

    dual = DualBatch(
        value=np.array(value),
        d={ax: np.array(y_d[i]) for i, ax in enumerate(d_axes)},
        dd={ax: np.array(y_dd[i]) for i, ax in enumerate(dd_axes)},
    )
    return (dual, cache) if keep else dual


def mlp_jet_vjp(theta, cache, g_value, g_d=None, g_dd=None):
    """Pull cotangents on the jet slots back to the flat weight vector.

    ``g_value`` has shape ``(n,)``; ``g_d`` and ``g_dd`` map axis to ``(n,)``
    cotangents (missing axes are treated as zero).
    """
    sizes, n = cache.sizes, cache.n
    d_axes, dd_axes = cache.d_axes, cache.dd_axes
    dd_index = [d_axes.index(a) for a in dd_axes]
    nd, ndd = len(d_axes), len(dd_axes)
    g_d = g_d or {}
    g_dd = g_dd or {}
    layers = unpack_layers(theta, sizes)
    grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]

    zero = np.zeros(n)
    ga = np.asarray(g_value, dtype=float)[:, None]
    ga_d = [np.asarray(g_d.get(ax, zero), dtype=float)[:, None] for ax in d_axes]
    ga_dd = [np.asarray(g_dd.get(ax, zero), dtype=float)[:, None] for ax in dd_axes]

    acts = list(cache.acts)
    if cache.output == "tanh_rect":
        z, s, a_d, a_dd = acts.pop()
        ga, ga_d, ga_dd = _tanh_jet_vjp(
            z, s, a_d, a_dd, dd_index, 0.5 * ga, [0.5 * v for v in ga_d], [0.5 * v for v in ga_dd]
        )

    for li in range(len(layers) - 1, 0, -1):
        w, _ = layers[li]
        stack = cache.stacks[li - 1]
        gstack = np.concatenate([ga] + ga_d + ga_dd, axis=0) if (nd or ndd) else ga
        gw, gb = grads[li]
        gw += stack.T @ gstack
        gb += ga.sum(axis=0)
        gz_all = gstack @ w.T
        gz = gz_all[:n]
        gz_d = [gz_all[(1 + i) * n : (2 + i) * n] for i in range(nd)]
        gz_dd = [gz_all[(1 + nd + i) * n : (2 + nd + i) * n] for i in range(ndd)]
        z, s, a_d, a_dd = acts.pop()
        ga, ga_d, ga_dd = _tanh_jet_vjp(z, s, a_d, a_dd, dd_index, gz, gz_d, gz_dd)

    gw0, gb0 = grads[0]
    gw0 += cache.inputs.T @ ga
    gb0 += ga.sum(axis=0)
    for ax, g in zip(d_axes, ga_d):
        gw0[ax] += g.sum(axis=0)
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
