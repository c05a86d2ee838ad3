"""The fixed module set and its lifting to probability distributions.

A distribution ("Dist") over Z_M is a plain numpy vector of length M; a
memory matrix is an (M, M) array whose row i is the distribution of cell i.
Every function accepts leading batch axes and works on the last axis, and
accepts either ndarrays or :class:`~nram.autodiff.Tensor` objects.  Given
ndarrays the result is an ndarray; given any Tensor the result is a Tensor
recorded on the active tape.
"""
from __future__ import annotations

import enum
import functools

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModuleKind(enum.Enum):
    READ = "READ"
    ZERO = "ZERO"
    ONE = "ONE"
    TWO = "TWO"
    INC = "INC"
    ADD = "ADD"
    SUB = "SUB"
    DEC = "DEC"
    LESS_THAN = "LESS_THAN"
    LESS_OR_EQUAL = "LESS_OR_EQUAL"
    EQUALITY = "EQUALITY"
    MIN = "MIN"
    MAX = "MAX"
    WRITE = "WRITE"

    @property
    def is_memory(self) -> bool:
        return self in (ModuleKind.READ, ModuleKind.WRITE)


BASE_SEQUENCE: tuple[ModuleKind, ...] = tuple(ModuleKind)
PURE_KINDS = tuple(k for k in ModuleKind if not k.is_memory)


def module_sequence(mod_exec: int = 1) -> list[ModuleKind]:
    """The 14-module sequence repeated ``mod_exec`` times."""
    if mod_exec < 1:
        raise ValueError("mod_exec must be >= 1")
    return list(BASE_SEQUENCE) * mod_exec


def module_names(mod_exec: int = 1) -> list[str]:
    """Unique names for each module slot: ``READ``, ..., ``READ#2``, ..."""
    names = []
    for rep in range(mod_exec):
        suffix = "" if rep == 0 else f"#{rep + 1}"
        names.extend(k.value + suffix for k in BASE_SEQUENCE)
    return names


def module_int(kind: ModuleKind, a: int, b: int, M: int) -> int:
    if kind.is_memory:
        raise ValueError("memory module requires machine state")
    if not (0 <= a < M and 0 <= b < M):
        raise ValueError(f"operands must lie in [0, {M})")
    if kind is ModuleKind.ZERO:
        return 0
    if kind is ModuleKind.ONE:
        return 1 % M
    if kind is ModuleKind.TWO:
        return 2 % M
    if kind is ModuleKind.INC:
        return (a + 1) % M
    if kind is ModuleKind.ADD:
        return (a + b) % M
    if kind is ModuleKind.SUB:
        return (a - b) % M
    if kind is ModuleKind.DEC:
        return (a - 1) % M
    if kind is ModuleKind.LESS_THAN:
        return int(a < b) % M
    if kind is ModuleKind.LESS_OR_EQUAL:
        return int(a <= b) % M
    if kind is ModuleKind.EQUALITY:
        return int(a == b) % M
    if kind is ModuleKind.MIN:
        return min(a, b)
    if kind is ModuleKind.MAX:
        return max(a, b)
    raise AssertionError(kind)


@functools.lru_cache(maxsize=None)
def value_table(kind: ModuleKind, M: int) -> np.ndarray:
    """``table[a, b] = module_int(kind, a, b, M)``."""
    table = np.empty((M, M), dtype=np.intp)
    for a in range(M):
        for b in range(M):
            table[a, b] = module_int(kind, a, b, M)
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=None)
def _circulant_index(M: int, sign: int) -> np.ndarray:
    a = np.arange(M)[:, None]
    c = np.arange(M)[None, :]
    # ADD: B index for (a, c) is c - a; SUB: a - c
    return ((c - a) % M) if sign > 0 else ((a - c) % M)


def _wrap(fn):
    """Return ndarrays for ndarray inputs, Tensors otherwise."""

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        tensor_in = any(isinstance(x, Tensor) for x in args)
        out = fn(*args, **kwargs)
        if tensor_in:
            return out
        return out.value if isinstance(out, Tensor) else out

    return inner


def _boolean(p_false, p_true, M):
    out = np.zeros(p_true.shape + (M,), dtype=np.result_type(p_true, float))
    out[..., 0] += p_false
    out[..., 1 % M] += p_true
    return out


def _forward_pure(kind: ModuleKind, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    M = A.shape[-1]
    K = ModuleKind
    if kind in (K.ZERO, K.ONE, K.TWO):
        k = {K.ZERO: 0, K.ONE: 1, K.TWO: 2}[kind] % M
        out = np.zeros(np.broadcast_shapes(A.shape, B.shape), dtype=np.result_type(A, B, float))
        out[..., k] = A.sum(axis=-1) * B.sum(axis=-1)
        return out
    if kind is K.INC:
        return np.roll(A, 1, axis=-1) * B.sum(axis=-1, keepdims=True)
    if kind is K.DEC:
        return np.roll(A, -1, axis=-1) * B.sum(axis=-1, keepdims=True)
    if kind is K.ADD:
        return np.einsum("...a,...ac->...c", A, B[..., _circulant_index(M, 1)])
    if kind is K.SUB:
        return np.einsum("...a,...ac->...c", A, B[..., _circulant_index(M, -1)])
    cA = np.cumsum(A, axis=-1)
    cB = np.cumsum(B, axis=-1)
    sA, sB = cA[..., -1:], cB[..., -1:]
    if kind is K.LESS_THAN:
        below = cA - A  # P(A < b)
        p_true = (B * below).sum(axis=-1)
        p_false = (B * (sA - below)).sum(axis=-1)
        return _boolean(p_false, p_true, M)
    if kind is K.LESS_OR_EQUAL:
        p_true = (B * cA).sum(axis=-1)
        p_false = (B * (sA - cA)).sum(axis=-1)
        return _boolean(p_false, p_true, M)
    if kind is K.EQUALITY:
        p_true = (A * B).sum(axis=-1)
        p_false = (A * (sB - B)).sum(axis=-1)
        return _boolean(p_false, p_true, M)
    if kind is K.MIN:
        # P(min=c) = P(A=c) P(B>=c) + P(A>c) P(B=c)
        return A * (sB - cB + B) + B * (sA - cA)
    if kind is K.MAX:
        # P(max=c) = P(A=c) P(B<=c) + P(A<c) P(B=c)
        return A * cB + B * (cA - A)
    raise ValueError(f"{kind} is not a pure module")


def _check_pair(A: Tensor, B: Tensor) -> None:
    if A.value.shape[-1] != B.value.shape[-1]:
        raise ValueError(
            f"dimension mismatch: distributions of length {A.value.shape[-1]} and {B.value.shape[-1]}")


@_wrap
def module_fuzzy(kind: ModuleKind, A, B):
    """Distribution of ``m(a, b)`` for independent ``a ~ A``, ``b ~ B``."""
    if kind.is_memory:
        raise ValueError("memory module requires machine state")
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    _check_pair(A, B)
    av, bv = A.value, B.value
    out = _forward_pure(kind, av, bv)
    table = value_table(kind, av.shape[-1])

    def back(g):
        G = g[..., table]  # G[..., a, b] = g[m(a, b)]
        return (np.einsum("...ab,...b->...a", G, bv), np.einsum("...ab,...a->...b", G, av))

    return ad.record(out, (A, B), back, kind.value)


def module_fuzzy_bruteforce(kind: ModuleKind, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Literal double sum over all operand pairs; reference for tests only."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 1:
        raise ValueError("dimension mismatch")
    M = len(A)
    out = np.zeros(M)
    for a in range(M):
        for b in range(M):
            out[module_int(kind, a, b, M)] += A[a] * B[b]
    return out


def _check_memory(mem: Tensor, p: Tensor) -> None:
    M = p.value.shape[-1]
    if mem.value.shape[-2:] != (M, M):
        raise ValueError(f"dimension mismatch: memory {mem.value.shape[-2:]} vs address of length {M}")


@_wrap
def read_fuzzy(mem, p):
    """Value stored under a fuzzy address: ``mem^T p``."""
    mem, p = ad.as_tensor(mem), ad.as_tensor(p)
    _check_memory(mem, p)
    mv, pv = mem.value, p.value
    out = np.einsum("...i,...ij->...j", pv, mv)

    def back(g):
        return (pv[..., :, None] * g[..., None, :], np.einsum("...j,...ij->...i", g, mv))

    return ad.record(out, (mem, p), back, "READ")


@_wrap
def write_fuzzy(mem, p, a):
    """Store ``a`` under fuzzy address ``p``: row i becomes ``(1-p_i) row_i + p_i a``."""
    mem, p, a = ad.as_tensor(mem), ad.as_tensor(p), ad.as_tensor(a)
    _check_memory(mem, p)
    if a.value.shape[-1] != p.value.shape[-1]:
        raise ValueError("dimension mismatch between address and value")
    mv, pv, av = mem.value, p.value, a.value
    keep = (1.0 - pv)[..., :, None]
    out = keep * mv + pv[..., :, None] * av[..., None, :]

    def back(g):
        g_mem = keep * g
        g_p = np.einsum("...ij,...j->...i", g, av) - (g * mv).sum(axis=-1)
        g_a = np.einsum("...i,...ij->...j", pv, g)
        return g_mem, g_p, g_a

    return ad.record(out, (mem, p, a), back, "WRITE")


def delta(k: int, M: int, dtype=float) -> np.ndarray:
    if not 0 <= k < M:
        raise ValueError(f"value {k} outside Z_{M}")
    d = np.zeros(M, dtype=dtype)
    d[k] = 1.0
    return d


def argmax_value(d) -> int | np.ndarray:
    """Most probable value; ties resolve to the lowest index."""
    return np.argmax(np.asarray(d.value if isinstance(d, Tensor) else d), axis=-1)


@_wrap
def entropy(d, eps: float = 1e-30):
    return ad.entropy(d, eps)


@_wrap
def renormalize(d):
    return ad.renormalize(d)


def is_dist(d, tol: float = 1e-6) -> bool:
    d = np.asarray(d)
    return bool(np.all(d >= 0) and np.all(np.abs(d.sum(axis=-1) - 1.0) <= tol))
