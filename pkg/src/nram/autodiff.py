"""Minimal reverse-mode differentiation over numpy arrays.

Operations performed while a :class:`Tape` is active are appended to it in
execution order; walking that list backwards is a valid reverse topological
order, so :meth:`Tape.backward` needs no graph sort.

Two deviations from textbook backprop are built in because the training
procedure needs them:

* every non-leaf adjoint can be clamped coordinate-wise to ``[-crop, crop]``
  once it has been fully accumulated (and before it is pushed to parents);
* :func:`renormalize` is treated as the identity on the backward pass.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Tape",
    "Tensor",
    "as_tensor",
    "active_tape",
    "add",
    "sub",
    "mul",
    "neg",
    "rsub",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_clip",
    "entropy",
    "sum_",
    "slice_last",
    "mix",
    "renormalize",
    "record",
    "stack",
    "mix_stacked",
    "append_row",
    "gather_last",
    "select_row",
]


class NumericalError(FloatingPointError):
    """A NaN or infinite adjoint showed up during the backward pass."""

    def __init__(self, op: str, index: int):
        super().__init__(f"non-finite adjoint at node #{index} (op={op})")
        self.op = op
        self.index = index


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "owns_grad")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value)
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = op
        self.requires_grad = requires_grad
        self.owns_grad = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, item):
        return _index(self, item)


_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _stack[-1] if _stack else None


class Tape:
    """Records operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack.remove(self)
        return False

    def backward(self, loss: Tensor, crop: float = math.inf, check_finite: bool = True) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached."""
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        clamp = math.isfinite(crop)
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            g = node.grad
            if g is None:
                continue
            if clamp:
                g = np.minimum(np.maximum(g, -crop), crop)
            # a NaN or inf anywhere makes the sum non-finite
            if check_finite and not math.isfinite(float(g.sum())) and not np.all(np.isfinite(g)):
                raise NumericalError(node.op, index)
            node.backward_fn(g)
            if check_finite:
                for parent in node.parents:
                    if parent.backward_fn is None and parent.grad is not None \
                            and not math.isfinite(float(parent.grad.sum())):
                        raise NumericalError(f"leaf via {node.op}", index)
            # intermediate adjoints are not needed after propagation
            node.grad = None
            node.owns_grad = False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class RowAdjoint:
    """Adjoint that is zero outside ``[..., row, :k]``."""

    __slots__ = ("row", "value")

    def __init__(self, row: int, value: np.ndarray):
        self.row = row
        self.value = value


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    # shared adjoint arrays are never written; only a buffer owned by t is updated in place
    if isinstance(g, RowAdjoint):
        if t.grad is None:
            t.grad = np.zeros(t.value.shape, dtype=g.value.dtype)
        elif not t.owns_grad:
            t.grad = t.grad.copy()
        t.owns_grad = True
        t.grad[..., g.row, :g.value.shape[-1]] += g.value
    elif t.grad is None:
        t.grad = np.asarray(g, dtype=t.value.dtype if t.value.dtype.kind == "f" else float)
        t.owns_grad = False
    else:
        t.grad = t.grad + g
        t.owns_grad = True


def record(value, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of an op.

    ``backward(g)`` must return one adjoint (or ``None``) per parent.
    """
    out = Tensor(value, op=op)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out.parents = tuple(parents)

    def push(g):
        for parent, pg in zip(out.parents, backward(g)):
            if pg is not None and parent.requires_grad:
                _accumulate(parent, pg)

    out.backward_fn = push
    tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def rsub(c, a) -> Tensor:
    return sub(as_tensor(c), a)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def matmul(x, w) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., n) and a matrix ``w`` of shape (n, m)."""
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.value, w.value

    def back(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return record(xv @ wv, (x, w), back, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return record(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), back, "softmax")


def log_clip(x, eps: float) -> Tensor:
    """``log(max(x, eps))``; the gradient is zero where the clip is active."""
    x = as_tensor(x)
    xv = x.value
    live = xv > eps
    safe = np.where(live, xv, eps)
    return record(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),), "log_clip")


def entropy(s, eps: float) -> Tensor:
    """``-sum(s * log(max(s, eps)))`` over the last axis."""
    s = as_tensor(s)
    sv = s.value
    live = sv > eps
    logs = np.log(np.where(live, sv, eps))
    out = -(sv * logs).sum(axis=-1)
    return record(out, (s,), lambda g: (-g[..., None] * (logs + live),), "entropy")


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.value.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return record(x.value.sum(axis=axis), (x,), back, "sum")


def slice_last(x, start, stop) -> Tensor:
    x = as_tensor(x)
    shape = x.value.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return record(x.value[..., start:stop], (x,), back, "slice")


def _index(x: Tensor, item) -> Tensor:
    shape = x.value.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[item] = g
        return (full,)

    return record(x.value[item], (x,), back, "index")


def mix(weights, pool: Sequence) -> Tensor:
    """Weighted average of a pool of vectors.

    ``weights`` has shape (..., K); every pool entry has shape (..., M);
    the result is ``sum_k weights[..., k] * pool[k]``.
    """
    weights = as_tensor(weights)
    pool = [as_tensor(p) for p in pool]
    if weights.value.shape[-1] != len(pool):
        raise ValueError(f"pool has {len(pool)} entries but weights have length {weights.value.shape[-1]}")
    stacked = np.stack([p.value for p in pool], axis=-2)
    wv = weights.value
    out = np.einsum("...k,...km->...m", wv, stacked)

    def back(g):
        gw = np.einsum("...m,...km->...k", g, stacked)
        gp = wv[..., :, None] * g[..., None, :]
        return (gw, *(gp[..., k, :] for k in range(len(pool))))

    return record(out, (weights, *pool), back, "mix")


def renormalize(x, enabled: bool = True) -> Tensor:
    """Rescale the last axis to sum to one; backward is the identity."""
    x = as_tensor(x)
    if not enabled:
        return x
    total = x.value.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("degenerate distribution: cannot renormalize a vector with zero mass")
    return record(x.value / total, (x,), lambda g: (g,), "renormalize")


def stack(items: Sequence, axis: int = -1) -> Tensor:
    """Stack same-shaped tensors along a new axis."""
    items = [as_tensor(t) for t in items]
    out = np.stack([t.value for t in items], axis=axis)

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(items)))

    return record(out, tuple(items), back, "stack")


def mix_stacked(weights, pool) -> Tensor:
    """Like :func:`mix` but the pool is one tensor of shape (..., K, M)."""
    weights, pool = as_tensor(weights), as_tensor(pool)
    wv, pv = weights.value, pool.value
    if wv.shape[-1] != pv.shape[-2]:
        raise ValueError(f"pool has {pv.shape[-2]} entries but weights have length {wv.shape[-1]}")
    out = np.einsum("...k,...km->...m", wv, pv)

    def back(g):
        return np.einsum("...m,...km->...k", g, pv), wv[..., :, None] * g[..., None, :]

    return record(out, (weights, pool), back, "mix")


def append_row(pool, row) -> Tensor:
    """Append ``row`` (..., M) to ``pool`` (..., K, M) giving (..., K+1, M)."""
    pool, row = as_tensor(pool), as_tensor(row)
    out = np.concatenate([pool.value, row.value[..., None, :]], axis=-2)
    return record(out, (pool, row), lambda g: (g[..., :-1, :], g[..., -1, :]), "append")


def gather_last(x, index, fill: float = -np.inf) -> Tensor:
    """``x[..., index]`` for an integer array ``index``; entries equal to -1 become ``fill``.

    Every valid index must be distinct so the backward pass is a scatter.
    """
    x = as_tensor(x)
    index = np.asarray(index)
    valid = index >= 0
    picked = index[valid]
    if np.unique(picked).size != picked.size:
        raise ValueError("gather indices must be distinct")
    safe = np.where(valid, index, 0)
    out = np.where(valid, x.value[..., safe], fill)
    shape = x.value.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., picked] = g[..., valid]
        return (full,)

    return record(out, (x,), back, "gather")


def select_row(weights, row: int, pool, renorm: bool = True) -> Tensor:
    """Mix ``pool`` (..., K, M) with ``weights[..., row, :K]`` and rescale to unit mass.

    Fuses :func:`mix_stacked` and :func:`renormalize`; the rescaling is the
    identity on the backward pass, as in :func:`renormalize`.
    """
    weights, pool = as_tensor(weights), as_tensor(pool)
    pv = pool.value
    K = pv.shape[-2]
    wv = weights.value[..., row, :K]
    out = np.einsum("...k,...km->...m", wv, pv)
    if renorm:
        total = out.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise ValueError("degenerate distribution: cannot renormalize a vector with zero mass")
        out = out / total

    def back(g):
        gw = RowAdjoint(row, np.einsum("...m,...km->...k", g, pv))
        return gw, wv[..., :, None] * g[..., None, :]

    return record(out, (weights, pool), back, "select")
