"""Array-level reverse-mode tape with support for nested differentiation.

Every primitive records its value, its operand indices and a vector-Jacobian
rule.  The rules are written against a small ``ops`` namespace so the same
rule either computes plain arrays (first-order gradients) or records new
nodes on the tape (``create_graph=True``), which is what makes gradients of
gradients possible.

Example
-------
>>> tape = Tape()
>>> x = tape.input(np.array([[0.3], [0.7]]))
>>> y = (x * x).tanh()
>>> (gx,) = tape.gradient(y.sum(), [x])
"""

import numpy as np

__all__ = ["Tape", "Var"]


def _sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (inverse of numpy broadcasting)."""
    if a.shape == tuple(shape):
        return a
    ndiff = a.ndim - len(shape)
    if ndiff > 0:
        a = a.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


def _embed(a, col, ncols):
    out = np.zeros((a.shape[0], ncols))
    out[:, col] = a[:, 0]
    return out


class _RawOps:
    """Array implementation of the rule namespace."""

    def __init__(self, tape):
        self.tape = tape

    def val(self, i):
        return self.tape.values[i]

    def const(self, value):
        return np.asarray(value, dtype=float)

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    matmul = staticmethod(np.matmul)

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def scale(a, c):
        return a * c

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def power(a, p):
        return a**p

    @staticmethod
    def sum_to(a, shape):
        return _sum_to(a, shape)

    @staticmethod
    def broadcast_to(a, shape):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def column(a, j):
        return a[:, j : j + 1]

    @staticmethod
    def embed(a, j, ncols):
        return _embed(a, j, ncols)


class _RecordOps:
    """Var implementation of the rule namespace (records onto the tape)."""

    def __init__(self, tape):
        self.tape = tape

    def val(self, i):
        return Var(self.tape, i)

    def const(self, value):
        return self.tape.constant(value)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def scale(a, c):
        return a.scale(c)

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def power(a, p):
        return a**p

    @staticmethod
    def sum_to(a, shape):
        return a.sum_to(shape)

    @staticmethod
    def broadcast_to(a, shape):
        return a.broadcast_to(shape)

    @staticmethod
    def column(a, j):
        return a.column(j)

    @staticmethod
    def embed(a, j, ncols):
        return a.embed(j, ncols)


# Vector-Jacobian rules: rule(g, node, ops, need) -> tuple of operand adjoints.


def _rule_add(g, i, ops, need):
    a, b = ops.tape.parents[i]
    sa, sb = ops.tape.values[a].shape, ops.tape.values[b].shape
    return (
        ops.sum_to(g, sa) if need[0] else None,
        ops.sum_to(g, sb) if need[1] else None,
    )


def _rule_sub(g, i, ops, need):
    a, b = ops.tape.parents[i]
    sa, sb = ops.tape.values[a].shape, ops.tape.values[b].shape
    return (
        ops.sum_to(g, sa) if need[0] else None,
        ops.neg(ops.sum_to(g, sb)) if need[1] else None,
    )


def _rule_mul(g, i, ops, need):
    a, b = ops.tape.parents[i]
    sa, sb = ops.tape.values[a].shape, ops.tape.values[b].shape
    return (
        ops.sum_to(ops.mul(g, ops.val(b)), sa) if need[0] else None,
        ops.sum_to(ops.mul(g, ops.val(a)), sb) if need[1] else None,
    )


def _rule_neg(g, i, ops, need):
    return (ops.neg(g),)


def _rule_scale(g, i, ops, need):
    return (ops.scale(g, ops.tape.meta[i]),)


def _rule_matmul(g, i, ops, need):
    a, b = ops.tape.parents[i]
    return (
        ops.matmul(g, ops.transpose(ops.val(b))) if need[0] else None,
        ops.matmul(ops.transpose(ops.val(a)), g) if need[1] else None,
    )


def _rule_affine(g, i, ops, need):
    x, w, b = ops.tape.parents[i]
    return (
        ops.matmul(g, ops.transpose(ops.val(w))) if need[0] else None,
        ops.matmul(ops.transpose(ops.val(x)), g) if need[1] else None,
        ops.sum_to(g, ops.tape.values[b].shape) if need[2] else None,
    )


def _rule_transpose(g, i, ops, need):
    return (ops.transpose(g),)


def _rule_tanh(g, i, ops, need):
    y = ops.val(i)
    return (ops.mul(g, ops.sub(ops.const(1.0), ops.mul(y, y))),)


def _rule_exp(g, i, ops, need):
    return (ops.mul(g, ops.val(i)),)


def _rule_log(g, i, ops, need):
    (a,) = ops.tape.parents[i]
    return (ops.mul(g, ops.power(ops.val(a), -1.0)),)


def _rule_power(g, i, ops, need):
    (a,) = ops.tape.parents[i]
    p = ops.tape.meta[i]
    return (ops.mul(g, ops.scale(ops.power(ops.val(a), p - 1.0), p)),)


def _rule_sum_to(g, i, ops, need):
    (a,) = ops.tape.parents[i]
    return (ops.broadcast_to(g, ops.tape.values[a].shape),)


def _rule_broadcast_to(g, i, ops, need):
    (a,) = ops.tape.parents[i]
    return (ops.sum_to(g, ops.tape.values[a].shape),)


def _rule_column(g, i, ops, need):
    (a,) = ops.tape.parents[i]
    return (ops.embed(g, ops.tape.meta[i], ops.tape.values[a].shape[1]),)


def _rule_embed(g, i, ops, need):
    return (ops.column(g, ops.tape.meta[i][0]),)


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        other = self._lift(other)
        return self.tape._push("sum", self.value + other.value, (self.index, other.index), _rule_add)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return self.tape._push("sum", self.value - other.value, (self.index, other.index), _rule_sub)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Var) and np.ndim(other) == 0:
            return self.scale(float(other))
        other = self._lift(other)
        return self.tape._push("product", self.value * other.value, (self.index, other.index), _rule_mul)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Var) and np.ndim(other) == 0:
            return self.scale(1.0 / float(other))
        return self * self._lift(other) ** -1.0

    def __rtruediv__(self, other):
        return self._lift(other) * self**-1.0

    def __neg__(self):
        return self.tape._push("sum", -self.value, (self.index,), _rule_neg)

    def __pow__(self, p):
        p = float(p)
        return self.tape._push("nonlinear", self.value**p, (self.index,), _rule_power, meta=p)

    def __matmul__(self, other):
        other = self._lift(other)
        return self.tape._push("affine", self.value @ other.value, (self.index, other.index), _rule_matmul)

    def scale(self, c):
        return self.tape._push("sum", self.value * c, (self.index,), _rule_scale, meta=c)

    @property
    def T(self):
        return self.tape._push("affine", self.value.T, (self.index,), _rule_transpose)

    def tanh(self):
        return self.tape._push("nonlinear", np.tanh(self.value), (self.index,), _rule_tanh)

    def exp(self):
        return self.tape._push("nonlinear", np.exp(self.value), (self.index,), _rule_exp)

    def log(self):
        return self.tape._push("nonlinear", np.log(self.value), (self.index,), _rule_log)

    def sum(self):
        return self.sum_to(())

    def sum_to(self, shape):
        shape = tuple(shape)
        return self.tape._push("sum", _sum_to(self.value, shape), (self.index,), _rule_sum_to)

    def broadcast_to(self, shape):
        value = np.broadcast_to(self.value, shape).copy()
        return self.tape._push("sum", value, (self.index,), _rule_broadcast_to)

    def column(self, j):
        return self.tape._push("sum", self.value[:, j : j + 1], (self.index,), _rule_column, meta=j)

    def embed(self, j, ncols):
        value = _embed(self.value, j, ncols)
        return self.tape._push("sum", value, (self.index,), _rule_embed, meta=(j, ncols))


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, so every node's operands precede
    it; :meth:`gradient` walks the record backwards with an adjoint buffer of
    the same length.
    """

    def __init__(self):
        self.values = []
        self.parents = []
        self.rules = []
        self.kinds = []
        self.meta = []

    def __len__(self):
        return len(self.values)

    def _push(self, kind, value, parents, rule, meta=None):
        self.values.append(np.asarray(value, dtype=float))
        self.parents.append(tuple(parents))
        self.rules.append(rule)
        self.kinds.append(kind)
        self.meta.append(meta)
        return Var(self, len(self.values) - 1)

    def input(self, value):
        return self._push("input", value, (), None)

    def constant(self, value):
        return self._push("constant", value, (), None)

    def affine(self, x, w, b=None):
        """``x @ w + b`` as a single primitive."""
        if b is None:
            return x @ w
        value = x.value @ w.value + b.value
        return self._push("affine", value, (x.index, w.index, b.index), _rule_affine)

    def gradient(self, output, wrt, create_graph=False, seed=None):
        """Adjoints of ``output`` with respect to each Var in ``wrt``.

        ``output`` is normally a scalar; for array outputs pass ``seed``
        (the cotangent).  With ``create_graph`` the returned adjoints are
        Vars recorded on this tape and can be differentiated again.
        """
        n = output.index + 1
        targets = {w.index for w in wrt}
        requires = np.zeros(n, dtype=bool)
        for i in range(n):
            if i in targets:
                requires[i] = True
            else:
                ps = self.parents[i]
                requires[i] = bool(ps) and any(requires[p] for p in ps)
        if seed is None:
            seed = np.ones_like(self.values[output.index])
        ops = _RecordOps(self) if create_graph else _RawOps(self)
        adj = [None] * n
        adj[output.index] = ops.const(seed)
        for i in range(output.index, -1, -1):
            g = adj[i]
            rule = self.rules[i]
            if g is None or rule is None or not requires[i]:
                continue
            ps = self.parents[i]
            need = tuple(bool(requires[p]) for p in ps)
            grads = rule(g, i, ops, need)
            for p, gp, nd in zip(ps, grads, need):
                if not nd or gp is None:
                    continue
                adj[p] = gp if adj[p] is None else ops.add(adj[p], gp)
            if i not in targets:
                adj[i] = None
        out = []
        for w in wrt:
            g = adj[w.index] if w.index < n else None
            if g is None:
                g = ops.const(np.zeros_like(w.value))
            out.append(g)
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)
