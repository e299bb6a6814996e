"""Dense float64 matrices with a small tape-based reverse-mode engine.

Values are plain 2-D ``numpy.ndarray`` objects (frozen after recording).
Every operation on a :class:`Var` appends one node to its :class:`Tape`;
:func:`backward` walks the tape once in reverse.

    >>> tape = Tape()
    >>> x = tape.leaf([[3.0]])
    >>> grads = backward(sum_all(x * x))
    >>> float(grads[x][0, 0])
    6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ShapeError

DIV_GUARD = 1e-12


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (used for seed derivation)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Seedable random stream.

    The 64-bit seed is expanded with splitmix64 into the 256-bit state of a
    PCG64 bit generator, so streams are identical across platforms.
    :meth:`child` derives independent sub-streams by key.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        words, s = [], self.seed
        for _ in range(4):
            s = splitmix64(s)
            words.append(s)
        entropy = sum(w << (64 * k) for k, w in enumerate(words))
        self._gen = np.random.Generator(np.random.PCG64(entropy))

    def child(self, key: int) -> "Rng":
        return Rng(splitmix64(self.seed ^ splitmix64(int(key) & _MASK64)))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low, high, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def integers(self, low, high=None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# --------------------------------------------------------------------------
# Tape and Var
# --------------------------------------------------------------------------


def as_matrix(value) -> np.ndarray:
    """Coerce to a 2-D float64 array (scalars become 1x1, vectors 1xn)."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with {arr.ndim} dims")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of operations; one per forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Var] = []
        self._count = 0

    def _new_index(self) -> int:
        self._count += 1
        return self._count - 1

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        var = Var(self, as_matrix(value), requires_grad)
        if requires_grad:
            self.leaves.append(var)
        return var

    def constant(self, value) -> "Var":
        return Var(self, as_matrix(value), False)


class Var:
    """Differentiable handle: a frozen value plus its position on a tape."""

    __slots__ = ("tape", "value", "index", "requires_grad", "__weakref__")

    def __init__(self, tape: Tape, value: np.ndarray, requires_grad: bool):
        if not np.all(np.isfinite(value)):
            raise NumericalError("non-finite entries in matrix")
        self.tape = tape
        self.value = _freeze(value)
        self.index = tape._new_index()
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _record(tape: Tape, value: np.ndarray, parents: Sequence[Var], grad_fn: Callable) -> Var:
    needs = any(p.requires_grad for p in parents)
    out = Var(tape, value, needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), grad_fn))
    return out


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _record(tape, av @ bv, (a, b), grad_fn)


def sparse_matmul(A, b: Var) -> Var:
    """``A @ b`` for a constant scipy sparse matrix ``A``; only ``b`` gets a gradient."""
    if A.shape[1] != b.shape[0]:
        raise ShapeError(f"sparse_matmul: inner dimensions differ, {A.shape} @ {b.shape}")
    At = A.T.tocsr()

    def grad_fn(g):
        return (At @ g,)

    return _record(b.tape, np.asarray(A @ b.value), (b,), grad_fn)


def _broadcast_shape(sa, sb, op):
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(k for k in range(2) if shape[k] == 1 and g.shape[k] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def elementwise(kind: str, a, b) -> Var:
    """Entrywise ``add``, ``sub``, ``mul``, ``div`` or ``scale``.

    Operands may broadcast along a unit dimension (column or row vectors,
    1x1 scalars). ``scale`` requires ``b`` to be a Python/NumPy scalar.
    """
    if kind == "scale":
        return scale(a, b)
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a.shape, b.shape, kind)
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape

    if kind == "add":
        value = av + bv

        def grad_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif kind == "sub":
        value = av - bv

        def grad_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif kind == "mul":
        value = av * bv

        def grad_fn(g):
            return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    elif kind == "div":
        bad = np.abs(bv) < DIV_GUARD
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NumericalError(f"div: |denominator| < {DIV_GUARD:g} at index {idx}")
        value = av / bv

        def grad_fn(g):
            return _unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)

    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return _record(tape, value, (a, b), grad_fn)


def add(a, b) -> Var:
    return elementwise("add", a, b)


def sub(a, b) -> Var:
    return elementwise("sub", a, b)


def mul(a, b) -> Var:
    return elementwise("mul", a, b)


def div(a, b) -> Var:
    return elementwise("div", a, b)


def scale(a: Var, s: float) -> Var:
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _record(a.tape, a.value * s, (a,), grad_fn)


def relu(a: Var) -> Var:
    pos = a.value > 0

    def grad_fn(g):
        return (g * pos,)

    return _record(a.tape, np.where(pos, a.value, 0.0), (a,), grad_fn)


def row_l2_norm(a: Var) -> Var:
    """Euclidean norm of each row, shape (m, 1). Zero rows get zero gradient."""
    av = a.value
    norms = np.sqrt(np.einsum("ij,ij->i", av, av))[:, None]

    def grad_fn(g):
        safe = np.where(norms > 0, norms, 1.0)
        return (np.where(norms > 0, g / safe, 0.0) * av,)

    return _record(a.tape, norms, (a,), grad_fn)


def pow_clamped(a: Var, exponent: float, floor: float = 1e-8) -> Var:
    """``max(a, floor) ** exponent`` for negative exponents, ``a ** exponent`` otherwise.

    Inputs must be nonnegative. The derivative is that of the clamped
    function, so entries below ``floor`` (negative exponent) or exactly at
    zero (nonnegative exponent) get zero gradient.
    """
    av = a.value
    if (av < 0).any():
        idx = tuple(int(i) for i in np.argwhere(av < 0)[0])
        raise NumericalError(f"pow_clamped: negative base at index {idx}")
    e = float(exponent)
    if e < 0:
        live = av > floor
        base = np.maximum(av, floor)
    else:
        live = av > 0
        base = av
    value = base**e

    def grad_fn(g):
        if e == 0:
            return (np.zeros_like(g),)
        safe = np.where(live, base, 1.0)
        return (np.where(live, g * e * safe ** (e - 1.0), 0.0),)

    return _record(a.tape, value, (a,), grad_fn)


def log_softmax_rows(a: Var) -> Var:
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _record(a.tape, out, (a,), grad_fn)


def masked_nll(logp: Var, labels, mask) -> Var:
    """Mean of ``-logp[i, labels[i]]`` over node indices in ``mask``."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("masked_nll: empty mask")
    m, L = logp.shape
    if labels.shape[0] != m:
        raise ShapeError(f"masked_nll: {labels.shape[0]} labels for {m} rows")
    picked = labels[mask]
    if picked.min() < 0 or picked.max() >= L:
        raise ValueError(f"masked_nll: label out of range [0, {L})")
    value = np.array([[-logp.value[mask, picked].mean()]])

    def grad_fn(g):
        out = np.zeros((m, L))
        np.add.at(out, (mask, picked), -g[0, 0] / mask.size)
        return (out,)

    return _record(logp.tape, value, (logp,), grad_fn)


def dropout(a: Var, rate: float, rng: Rng | None, training: bool) -> Var:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def grad_fn(g):
        return (g * keep,)

    return _record(a.tape, a.value * keep, (a,), grad_fn)


def sum_all(a: Var) -> Var:
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, g[0, 0]),)

    return _record(a.tape, np.array([[a.value.sum()]]), (a,), grad_fn)


def gather_rows(a: Var, index) -> Var:
    """Rows ``a[index]``; ``index`` may repeat."""
    index = np.asarray(index, dtype=np.int64)
    m = a.shape[0]

    def grad_fn(g):
        scatter = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(m, index.size))
        return (np.asarray(scatter @ g),)

    return _record(a.tape, a.value[index], (a,), grad_fn)


def segment_sum(a: Var, offsets) -> Var:
    """Sum consecutive row blocks ``a[offsets[i]:offsets[i+1]]``; blocks must be nonempty."""
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if (counts <= 0).any():
        raise ValueError("segment_sum: empty segment")
    owner = np.repeat(np.arange(counts.size), counts)

    def grad_fn(g):
        return (g[owner],)

    return _record(a.tape, np.add.reduceat(a.value, offsets[:-1], axis=0), (a,), grad_fn)


# --------------------------------------------------------------------------
# Reverse pass and checking
# --------------------------------------------------------------------------


def backward(loss: Var) -> dict[Var, np.ndarray]:
    """Gradients of a 1x1 ``loss`` for every grad-requiring leaf of its tape."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out.index, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    return {leaf: grads.get(leaf.index, np.zeros(leaf.shape)) for leaf in tape.leaves}


def finite_diff_check(f: Callable[[Var], Var], x, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst entrywise relative error between backward and central differences.

    ``f`` maps a Var (a fresh leaf on a fresh tape) to a 1x1 Var.
    Relative errors use ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x = as_matrix(x)

    def value_at(point):
        out = f(Tape().leaf(point)).value[0, 0]
        if not np.isfinite(out):
            raise NumericalError("finite_diff_check: f returned a non-finite value")
        return out

    tape = Tape()
    leaf = tape.leaf(x)
    analytic = backward(f(leaf))[leaf]
    numeric = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (value_at(up) - value_at(down)) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
