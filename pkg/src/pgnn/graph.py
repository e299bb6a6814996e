"""Undirected weighted graphs in CSR form and the discrete operators on them.

Node signals are ``(n, c)`` arrays (1-D arrays are treated as one channel
and returned 1-D). Edge fields are ``(nnz, c)`` arrays with one row per
directed slot, laid out exactly like the CSR neighbour list: slot ``s``
runs from ``g.rows[s]`` to ``g.neighbors[s]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import DataError, ShapeError

DENSE_LIMIT = 2048
NORM_FLOOR = 1e-8


def _frozen(arr) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SparseGraph:
    n: int
    offsets: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    degrees: np.ndarray

    @classmethod
    def from_arrays(cls, n: int, src, dst, weight=None) -> "SparseGraph":
        """Build from parallel arrays of undirected edges (either orientation)."""
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise DataError("edge endpoint arrays differ in length")
        w = np.ones(src.size) if weight is None else np.asarray(weight, dtype=np.float64).ravel()
        if w.shape != src.shape:
            raise DataError("edge weight array length differs from endpoints")
        n = int(n)
        if n < 1:
            raise DataError("graph needs at least one node")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise DataError(f"edge endpoint outside [0, {n})")
        loops = np.flatnonzero(src == dst)
        if loops.size:
            raise DataError(f"self-loop at node {int(src[loops[0]])}")
        if not np.all(np.isfinite(w)) or (w <= 0).any():
            k = int(np.flatnonzero(~(w > 0) | ~np.isfinite(w))[0])
            raise DataError(f"nonpositive weight {w[k]} on edge ({int(src[k])}, {int(dst[k])})")

        lo, hi = np.minimum(src, dst), np.maximum(src, dst)
        order = np.lexsort((w, hi, lo))
        lo, hi, w = lo[order], hi[order], w[order]
        same_pair = (lo[1:] == lo[:-1]) & (hi[1:] == hi[:-1])
        clash = same_pair & (w[1:] != w[:-1])
        if clash.any():
            k = int(np.flatnonzero(clash)[0])
            raise DataError(f"conflicting weights for edge ({int(lo[k])}, {int(hi[k])})")
        keep = np.concatenate([[True], ~same_pair]) if lo.size else np.zeros(0, bool)
        lo, hi, w = lo[keep], hi[keep], w[keep]

        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        ww = np.concatenate([w, w])
        order = np.lexsort((cols, rows))
        rows, cols, ww = rows[order], cols[order], ww[order]
        counts = np.bincount(rows, minlength=n)
        isolated = np.flatnonzero(counts == 0)
        if isolated.size:
            raise DataError(f"node {int(isolated[0])} is isolated")
        offsets = np.concatenate([[0], np.cumsum(counts)])
        degrees = np.add.reduceat(ww, offsets[:-1])
        return cls(n, _frozen(offsets), _frozen(cols), _frozen(ww), _frozen(degrees))

    # derived layouts, computed once per graph

    @cached_property
    def rows(self) -> np.ndarray:
        """Source node of every directed slot."""
        return _frozen(np.repeat(np.arange(self.n), np.diff(self.offsets)))

    @cached_property
    def reverse(self) -> np.ndarray:
        """``reverse[s]`` is the slot holding the opposite direction of slot ``s``."""
        key = self.rows * self.n + self.neighbors
        rkey = self.neighbors * self.n + self.rows
        return _frozen(np.searchsorted(key, rkey))

    @cached_property
    def edge_slots(self) -> np.ndarray:
        """Slot index of each undirected edge, taking the ``row < col`` orientation."""
        return _frozen(np.flatnonzero(self.rows < self.neighbors))

    @cached_property
    def src_coef(self) -> np.ndarray:
        """sqrt(W_ij / D_ii) per slot, as a column."""
        return _frozen(np.sqrt(self.weights / self.degrees[self.rows])[:, None])

    @cached_property
    def sqrt_weights(self) -> np.ndarray:
        """sqrt(W_ij) per slot, as a column."""
        return _frozen(np.sqrt(self.weights)[:, None])

    @cached_property
    def sqrt_degrees(self) -> np.ndarray:
        """sqrt(D_ii) per node, as a column."""
        return _frozen(np.sqrt(self.degrees)[:, None])

    @cached_property
    def sym_norm(self) -> np.ndarray:
        """1 / sqrt(D_ii D_jj) per slot, as a column."""
        return _frozen(1.0 / np.sqrt(self.degrees[self.rows] * self.degrees[self.neighbors])[:, None])

    @property
    def nnz(self) -> int:
        return int(self.neighbors.size)

    @property
    def num_edges(self) -> int:
        return self.nnz // 2

    def edge_counts(self) -> np.ndarray:
        """Number of incident edges per node (unweighted degree)."""
        return np.diff(self.offsets)

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges as ``(u, v, w)`` arrays with ``u < v``, canonical order."""
        s = self.edge_slots
        return self.rows[s], self.neighbors[s], self.weights[s]

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]

    def same_as(self, other: "SparseGraph") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.weights, other.weights)
        )


def from_edges(n: int, edges: Iterable) -> SparseGraph:
    """Graph from ``(i, j)`` or ``(i, j, w)`` tuples; weight defaults to 1.

    >>> from_edges(3, [(0, 1), (1, 2), (0, 2)]).degrees.tolist()
    [2.0, 2.0, 2.0]
    """
    src, dst, w = [], [], []
    for e in edges:
        if len(e) == 2:
            i, j = e
            wt = 1.0
        elif len(e) == 3:
            i, j, wt = e
        else:
            raise DataError(f"edge {e!r} must be (i, j) or (i, j, w)")
        src.append(int(i))
        dst.append(int(j))
        w.append(float(wt))
    return SparseGraph.from_arrays(n, src, dst, w)


def _as_signal(g: SparseGraph, f) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=np.float64)
    flat = f.ndim == 1
    if flat:
        f = f[:, None]
    if f.ndim != 2 or f.shape[0] != g.n:
        raise ShapeError(f"signal has shape {f.shape}, graph has {g.n} nodes")
    return f, flat


def _as_field(g: SparseGraph, field) -> tuple[np.ndarray, bool]:
    field = np.asarray(field, dtype=np.float64)
    flat = field.ndim == 1
    if flat:
        field = field[:, None]
    if field.ndim != 2 or field.shape[0] != g.nnz:
        raise ShapeError(f"edge field has {field.shape[0]} slots, graph has {g.nnz}")
    return field, flat


def _raw_gradient(g: SparseGraph, f: np.ndarray) -> np.ndarray:
    # sqrt(W) (f_j / sqrt(D_j) - f_i / sqrt(D_i)) keeps the sqrt(D) kernel exactly zero
    scaled = f / g.sqrt_degrees
    return g.sqrt_weights * (scaled[g.neighbors] - scaled[g.rows])


def gradient(g: SparseGraph, f) -> np.ndarray:
    """Graph gradient: slot (i, j) gets sqrt(W/D_j) f(j) - sqrt(W/D_i) f(i)."""
    f, flat = _as_signal(g, f)
    out = _raw_gradient(g, f)
    return out[:, 0] if flat else out


def divergence(g: SparseGraph, field) -> np.ndarray:
    """Adjoint of :func:`gradient` up to sign: <grad f, field> = -<f, div field>."""
    field, flat = _as_field(g, field)
    flux = g.src_coef * (field - field[g.reverse])
    out = np.add.reduceat(flux, g.offsets[:-1], axis=0)
    return out[:, 0] if flat else out


def edge_norms(g: SparseGraph, f) -> np.ndarray:
    """Per-slot Euclidean norm of the gradient field, shape (nnz,)."""
    grad = gradient(g, _as_signal(g, f)[0])
    return np.sqrt(np.einsum("ij,ij->i", grad, grad))


def norm_power(norms: np.ndarray, exponent: float, floor: float = NORM_FLOOR) -> np.ndarray:
    """``norms ** exponent`` with the floor clamp and the zero rule for negative exponents."""
    if exponent == 0:
        return np.ones_like(norms)
    if exponent > 0:
        return norms**exponent
    return np.where(norms > 0, np.maximum(norms, floor) ** exponent, 0.0)


def _check_p(p: float) -> None:
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")


def apply_p_laplacian(g: SparseGraph, f, p: float, floor: float = NORM_FLOOR) -> np.ndarray:
    """Graph p-Laplacian, -1/2 div(||grad f||^(p-2) grad f)."""
    _check_p(p)
    f, flat = _as_signal(g, f)
    grad = _raw_gradient(g, f)
    scale = norm_power(np.sqrt(np.einsum("ij,ij->i", grad, grad)), p - 2.0, floor)
    out = -np.add.reduceat(g.src_coef * scale[:, None] * grad, g.offsets[:-1], axis=0)
    return out[:, 0] if flat else out


def variation_sp(g: SparseGraph, f, p: float) -> float:
    """S_p(f) = 1/2 sum over directed slots of ||grad f||^p."""
    _check_p(p)
    return 0.5 * float(np.sum(edge_norms(g, f) ** p))


def _dense_gate(g: SparseGraph, limit: int = DENSE_LIMIT) -> None:
    if g.n > limit:
        raise ValueError(f"dense materialization limited to n <= {limit}, graph has {g.n}")


def normalized_adjacency(g: SparseGraph) -> np.ndarray:
    """Dense D^{-1/2} W D^{-1/2}."""
    _dense_gate(g)
    out = np.zeros((g.n, g.n))
    out[g.rows, g.neighbors] = g.weights * g.sym_norm[:, 0]
    return out


def dense_laplacian(g: SparseGraph) -> np.ndarray:
    """Dense I - D^{-1/2} W D^{-1/2}."""
    return np.eye(g.n) - normalized_adjacency(g)


def homophily(g: SparseGraph, labels) -> float:
    """Mean over nodes of the fraction of neighbours sharing the node's label."""
    labels = np.asarray(labels)
    if labels.shape[0] != g.n:
        raise ShapeError(f"{labels.shape[0]} labels for {g.n} nodes")
    same = (labels[g.rows] == labels[g.neighbors]).astype(np.float64)
    frac = np.add.reduceat(same, g.offsets[:-1]) / g.edge_counts()
    return float(frac.mean())
