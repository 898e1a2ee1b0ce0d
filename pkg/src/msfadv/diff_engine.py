"""Reverse-mode adjoint tape over float64 arrays.

Every differentiable operation in the toolkit is written against the small op
set below. Each op accepts either plain arrays or :class:`Var` handles; when no
argument is a ``Var`` the op simply evaluates with numpy and returns an array,
so the same rendering / feature code runs gradient-free for evaluation and
black-box search.

A :class:`Tape` is single-writer and meant to live for one objective
evaluation. Nodes are appended in creation order, which is a topological
order, so :func:`backward` walks indices in reverse and accumulates adjoints in
a fixed order (bit-identical results across repeated calls).

Discrete selections (occupancy threshold, ray-hit sets, max/min winners) are
recorded as explicit custom-adjoint nodes: see :func:`straight_through`,
:func:`segment_max` and :func:`max_`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape", "Var", "NonFiniteError", "TapeError", "backward", "finite_diff_check",
    "value_of", "is_var", "asarray",
    "add", "sub", "mul", "div", "neg", "power", "tanh", "exp", "log", "sqrt",
    "abs_", "sigmoid", "maximum", "minimum", "clip", "sum_", "mean", "max_", "min_",
    "take", "reshape", "transpose", "matmul", "stack", "concatenate", "where",
    "scatter_add", "segment_max", "segment_min", "replace_rows", "embed",
    "straight_through", "cross", "dot", "norm",
]


class TapeError(ValueError):
    """Misuse of a tape: foreign or non-scalar outputs, mixed tapes."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf value or adjoint was produced; ``op`` names the culprit."""

    def __init__(self, op: str, where: str = "value"):
        super().__init__(f"non-finite {where} produced by operation '{op}'")
        self.op = op


class _Node:
    __slots__ = ("value", "parents", "vjp", "op")

    def __init__(self, value, parents, vjp, op):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Var:
    """Handle to a node on a tape. Arithmetic operators record new nodes."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000.0

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    # comparisons act on forward values and return plain boolean arrays
    def __lt__(self, o):
        return self.value < value_of(o)

    def __le__(self, o):
        return self.value <= value_of(o)

    def __gt__(self, o):
        return self.value > value_of(o)

    def __ge__(self, o):
        return self.value >= value_of(o)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of operations with their local vector-Jacobian products."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._bad: dict[int, str] = {}

    def __len__(self):
        return len(self._nodes)

    def variable(self, value) -> Var:
        """Register an independent input."""
        return self.record(np.array(value, dtype=np.float64), (), None, "input")

    def record(self, value, parents: Sequence[Var], vjp: Callable | None, op: str) -> Var:
        """Append a node. ``vjp(g)`` must return one adjoint per parent."""
        value = np.asarray(value, dtype=np.float64)
        idx = len(self._nodes)
        self._nodes.append(_Node(value, tuple(parents), vjp, op))
        if not np.all(np.isfinite(value)):
            self._bad[idx] = op
        return Var(self, idx, value)

    def backward(self, output: Var, wrt: Sequence[Var] | None = None):
        return backward(self, output, wrt)


def backward(tape: Tape, output: Var, wrt: Sequence[Var] | None = None):
    """Adjoints of scalar ``output`` with respect to tape inputs.

    Returns a list aligned with ``wrt`` when given, otherwise a dict mapping
    every input node index to its gradient. Inputs the output does not depend
    on get zero gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise TapeError("output is not a node of this tape")
    if output.value.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.value.shape}")
    nodes = tape._nodes
    grads: list[np.ndarray | None] = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        if i in tape._bad:
            # name the earliest non-finite record: that is where the NaN/Inf originated
            raise NonFiniteError(tape._bad[min(k for k in tape._bad if k <= i)])
        node = nodes[i]
        if node.vjp is None:
            continue
        pgs = node.vjp(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.value.shape:
                pg = _unbroadcast(pg, p.value.shape)
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op, "adjoint")
            j = p.index
            grads[j] = pg if grads[j] is None else grads[j] + pg

    def grad_of(v: Var):
        if v.tape is not tape:
            raise TapeError("gradient requested for a node of another tape")
        g = grads[v.index] if v.index < len(grads) else None
        return np.zeros_like(v.value) if g is None else g

    if wrt is not None:
        return [grad_of(v) for v in wrt]
    return {
        i: (grads[i] if grads[i] is not None else np.zeros_like(nodes[i].value))
        for i in range(output.index + 1)
        if nodes[i].op == "input"
    }


# ----------------------------------------------------------------------------
# helpers


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def asarray(x):
    return x if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _unary(x, fwd, dfn, op):
    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = fwd(xv)
    return x.tape.record(out, (x,), lambda g: (g * dfn(xv, out),), op)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return np.add(av, bv)
    parents = [x for x in (a, b) if isinstance(x, Var)]
    return tape.record(np.add(av, bv), parents, lambda g: (g,) * len(parents), "add")


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return np.subtract(av, bv)
    parents, signs = [], []
    if isinstance(a, Var):
        parents.append(a)
        signs.append(1.0)
    if isinstance(b, Var):
        parents.append(b)
        signs.append(-1.0)
    return tape.record(np.subtract(av, bv), parents, lambda g: tuple(s * g for s in signs), "sub")


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if tape is None:
        return np.multiply(av, bv)
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: g * bv)
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: g * av)
    return tape.record(np.multiply(av, bv), parents, lambda g: tuple(f(g) for f in fns), "mul")


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: g / bv)
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: -g * out / bv)
    return tape.record(out, parents, lambda g: tuple(f(g) for f in fns), "div")


def neg(x):
    return _unary(x, np.negative, lambda xv, out: -1.0, "neg")


def power(x, p: float):
    p = float(p)
    return _unary(x, lambda v: np.power(v, p), lambda xv, out: p * np.power(xv, p - 1.0), "pow")


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: 1.0 - out * out, "tanh")


def exp(x):
    return _unary(x, np.exp, lambda xv, out: out, "exp")


def log(x):
    return _unary(x, np.log, lambda xv, out: 1.0 / xv, "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda xv, out: 0.5 / out, "sqrt")


def abs_(x):
    # subgradient 0 at the kink
    return _unary(x, np.abs, lambda xv, out: np.sign(xv), "abs")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    def fwd(v):
        v = np.asarray(v, dtype=np.float64)
        return _sigmoid(v.reshape(-1)).reshape(v.shape)

    return _unary(x, fwd, lambda xv, out: out * (1.0 - out), "sigmoid")


def maximum(x, c):
    """Elementwise max against a constant; adjoint flows where x wins."""
    c = np.asarray(value_of(c), dtype=np.float64)
    return _unary(x, lambda v: np.maximum(v, c), lambda xv, out: (xv >= c).astype(np.float64), "maximum")


def minimum(x, c):
    c = np.asarray(value_of(c), dtype=np.float64)
    return _unary(x, lambda v: np.minimum(v, c), lambda xv, out: (xv <= c).astype(np.float64), "minimum")


def clip(x, lo, hi):
    return _unary(
        x,
        lambda v: np.clip(v, lo, hi),
        lambda xv, out: ((xv >= lo) & (xv <= hi)).astype(np.float64),
        "clip",
    )


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return x.tape.record(out, (x,), vjp, "sum")


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def _arg_reduce(x, pick, op):
    xv = np.asarray(value_of(x), dtype=np.float64)
    flat = xv.reshape(-1)
    k = int(pick(flat))
    out = flat[k]
    if not isinstance(x, Var):
        return out

    def vjp(g):
        z = np.zeros(flat.size)
        z[k] = g
        return (z.reshape(xv.shape),)

    return x.tape.record(out, (x,), vjp, op)


def max_(x):
    """Global maximum; the adjoint goes to the first winner only."""
    return _arg_reduce(x, np.argmax, "max")


def min_(x):
    return _arg_reduce(x, np.argmin, "min")


def take(x, idx):
    """Numpy indexing (basic or advanced) with scatter-add adjoint."""
    if isinstance(idx, Var):
        raise TapeError("indices must be constant")
    if not isinstance(x, Var):
        return np.asarray(x)[idx]
    shape = x.value.shape
    out = x.value[idx]

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return x.tape.record(out, (x,), vjp, "take")


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if not isinstance(x, Var):
        return np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)
    return x.tape.record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        if bv.ndim == 1:
            fns.append(lambda g: np.multiply.outer(g, bv))
        else:
            fns.append(lambda g: np.matmul(g, np.swapaxes(bv, -1, -2)))
    if isinstance(b, Var):
        parents.append(b)
        if bv.ndim == 1:
            fns.append(lambda g: np.matmul(np.swapaxes(av, -1, -2), g))
        else:
            fns.append(lambda g: np.matmul(np.swapaxes(av, -1, -2), g))
    return tape.record(out, parents, lambda g: tuple(f(g) for f in fns), "matmul")


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [np.asarray(value_of(x), dtype=np.float64) for x in xs]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    parents = [(i, x) for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i, _ in parents)

    return tape.record(out, [x for _, x in parents], vjp, "stack")


def concatenate(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [np.asarray(value_of(x), dtype=np.float64) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = [(i, x) for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        res = []
        for i, _ in parents:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return tuple(res)

    return tape.record(out, [x for _, x in parents], vjp, "concatenate")


def where(mask, a, b):
    """Select with a constant boolean mask (the selection itself is not differentiated)."""
    mask = np.asarray(mask, dtype=bool)
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: np.where(mask, g, 0.0))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: np.where(mask, 0.0, g))
    return tape.record(out, parents, lambda g: tuple(f(g) for f in fns), "where")


# ----------------------------------------------------------------------------
# segment / scatter ops


def scatter_add(values, index, n: int):
    """``out[k] = sum of values[i] with index[i] == k`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    vv = np.asarray(value_of(values), dtype=np.float64)
    out = np.zeros((n,) + vv.shape[1:])
    np.add.at(out, index, vv)
    if not isinstance(values, Var):
        return out
    return values.tape.record(out, (values,), lambda g: (g[index],), "scatter_add")


def _segment_extreme(values, index, n, mask, fill, largest, op):
    index = np.asarray(index, dtype=np.int64)
    vv = np.asarray(value_of(values), dtype=np.float64)
    keep = np.ones(vv.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sel = np.flatnonzero(keep)
    out = np.full(n, float(fill))
    winner = np.full(n, -1, dtype=np.int64)
    if sel.size:
        seg, vals = index[sel], vv[sel]
        key = -vals if largest else vals
        # stable sort: ties resolved to the lowest input position
        order = np.lexsort((sel, key, seg))
        seg_sorted = seg[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = seg_sorted[1:] != seg_sorted[:-1]
        win = order[first]
        winner[seg[win]] = sel[win]
        out[seg[win]] = vals[win]
    if not isinstance(values, Var):
        return out
    has = winner >= 0
    w_idx = winner[has]

    def vjp(g):
        z = np.zeros(vv.shape)
        z[w_idx] = g[has]
        return (z,)

    return values.tape.record(out, (values,), vjp, op)


def segment_max(values, index, n: int, mask=None, fill: float = 0.0):
    """Per-segment maximum; empty segments get ``fill``. Adjoint flows to the winner."""
    return _segment_extreme(values, index, n, mask, fill, True, "segment_max")


def segment_min(values, index, n: int, mask=None, fill: float = 0.0):
    return _segment_extreme(values, index, n, mask, fill, False, "segment_min")


def replace_rows(base, rows, values):
    """Copy of ``base`` with ``base[rows] = values``; rows must be unique."""
    rows = np.asarray(rows, dtype=np.int64)
    tape = _tape_of(base, values)
    bv = np.array(value_of(base), dtype=np.float64)
    bv[rows] = value_of(values)
    if tape is None:
        return bv
    parents, fns = [], []
    if isinstance(base, Var):
        parents.append(base)

        def gb(g):
            g = g.copy()
            g[rows] = 0.0
            return g

        fns.append(gb)
    if isinstance(values, Var):
        parents.append(values)
        fns.append(lambda g: g[rows])
    return tape.record(bv, parents, lambda g: tuple(f(g) for f in fns), "replace_rows")


def embed(base, patch, window: tuple):
    """Copy of constant ``base`` with ``base[window] = patch``."""
    bv = np.array(value_of(base), dtype=np.float64)
    bv[window] = value_of(patch)
    if not isinstance(patch, Var):
        return bv
    return patch.tape.record(bv, (patch,), lambda g: (g[window],), "embed")


def straight_through(x, forward_value):
    """Forward emits ``forward_value``; backward passes the adjoint to ``x`` unchanged."""
    fv = np.asarray(forward_value, dtype=np.float64)
    if not isinstance(x, Var):
        return fv
    return x.tape.record(fv, (x,), lambda g: (g,), "straight_through")


# ----------------------------------------------------------------------------
# small vector helpers on the last axis


def cross(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.cross(av, bv)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: np.cross(bv, g))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: np.cross(g, av))
    return tape.record(out, parents, lambda g: tuple(f(g) for f in fns), "cross")


def dot(a, b):
    return sum_(mul(a, b), axis=-1)


def norm(x, eps: float = 0.0):
    return sqrt(add(dot(x, x), eps))


# ----------------------------------------------------------------------------
# verification harness


def finite_diff_check(f: Callable, x, h: float = 1e-5, coords=None, scale: bool = True) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a vector (array or Var) to a scalar. The step for coordinate i is
    ``h * max(1, |x_i|)`` when ``scale`` is set. Relative errors use the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.variable(x)
    y = f(xv)
    if not isinstance(y, Var):
        analytic = np.zeros_like(x)
    else:
        (analytic,) = backward(tape, y, [xv])
    flat = x.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        step = h * max(1.0, abs(flat[i])) if scale else h
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(np.asarray(value_of(f(xp.reshape(x.shape)))).reshape(()))
        fm = float(np.asarray(value_of(f(xm.reshape(x.shape)))).reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_diff_check probe")
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
