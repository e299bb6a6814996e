"""Spectral checks: Jacobi eigensolver for the 2-Laplacian, p-eigenpairs,
eigenvalue bounds, filter regimes and aggregation-weight entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .graph import (
    NORM_FLOOR,
    SparseGraph,
    _as_signal,
    _dense_gate,
    apply_p_laplacian,
    dense_laplacian,
    edge_norms,
    normalized_adjacency,
)
from .solver import compute_coeffs, compute_M

EIGH_LIMIT = 1024


@dataclass(frozen=True)
class EigenPair:
    lam: float
    u: np.ndarray


@dataclass
class FilterReport:
    grad_norm: np.ndarray
    response: np.ndarray
    regime: list[str]
    threshold: float
    n_k: int

    def rows(self):
        for i, (a, b, r) in enumerate(zip(self.grad_norm, self.response, self.regime)):
            yield i, float(a), float(b), r


# --------------------------------------------------------------------------
# Jacobi eigensolver
# --------------------------------------------------------------------------


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """m - 1 rounds of m / 2 disjoint pairs covering every pair once (m even)."""
    ring = list(range(1, m))
    rounds = []
    for _ in range(m - 1):
        order = [0] + ring
        p = np.array(order[: m // 2])
        q = np.array(order[m // 2:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        ring = ring[-1:] + ring[:-1]
    return rounds


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.linalg.norm(off))


def jacobi_eigh(A, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits all pairs in round-robin order; the pairs of one
    round are disjoint and rotated together. Stops when the off-diagonal
    Frobenius norm is at most ``tol * ||A||_F``. Returns ascending
    eigenvalues and orthonormal eigenvector columns.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0))):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    n = A.shape[0]
    m = n + (n % 2)
    if m != n:
        # pad with a decoupled zero row; its rotations are all identities
        A = np.pad(A, ((0, 1), (0, 1)))
    V = np.eye(m)
    scale = max(float(np.linalg.norm(A)), 1e-300)
    rounds = _round_robin(m) if m > 1 else []

    sweeps = 0
    while _off_norm(A) > tol * scale:
        if sweeps == max_sweeps:
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps, off-diagonal norm {_off_norm(A):.3e}"
            )
        for p, q in rounds:
            apq = A[p, q]
            diff = A[q, q] - A[p, p]
            # tan of the rotation angle, written to avoid overflow for tiny apq
            denom = np.abs(diff) + np.hypot(diff, 2.0 * apq)
            t = np.where(apq != 0, 2.0 * apq * np.where(diff >= 0, 1.0, -1.0), 0.0)
            t = t / np.where(denom > 0, denom, 1.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            Ap, Aq = A[p].copy(), A[q].copy()
            A[p] = c[:, None] * Ap - s[:, None] * Aq
            A[q] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
        sweeps += 1

    w = np.diag(A)[:n].copy()
    V = V[:n, :n]
    order = np.argsort(w, kind="stable")
    w, V = w[order], V[:, order]
    # sign convention: largest-magnitude entry of each column is positive
    pivot = np.abs(V).argmax(axis=0)
    V = V * np.where(V[pivot, np.arange(n)] < 0, -1.0, 1.0)
    return w, V


def eigh_p2(g: SparseGraph) -> list[EigenPair]:
    """All eigenpairs of I - D^{-1/2} W D^{-1/2}, eigenvalues ascending."""
    _dense_gate(g, EIGH_LIMIT)
    w, V = jacobi_eigh(dense_laplacian(g))
    return [EigenPair(float(lam), V[:, k].copy()) for k, lam in enumerate(w)]


# --------------------------------------------------------------------------
# p-eigenpairs
# --------------------------------------------------------------------------


def phi_p(u, p: float) -> np.ndarray:
    """Entrywise |u|^(p-2) u, with phi_p(0) = 0."""
    u = np.asarray(u, dtype=np.float64)
    a = np.abs(u)
    return np.where(a > 0, np.sign(u) * a ** (p - 1.0), 0.0)


def p_normalize(u, p: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    total = float(np.sum(np.abs(u) ** p))
    if total == 0:
        raise ValueError("cannot normalize the zero vector")
    return u / total ** (1.0 / p)


def p_inner(u, v, p: float) -> float:
    return float(np.dot(phi_p(u, p), phi_p(v, p)))


def verify_p_eigenpair(g: SparseGraph, pair: EigenPair, p: float, floor: float = NORM_FLOOR) -> float:
    """max_i |(Delta_p u)_i - lam |u_i|^(p-2) u_i| after scaling u to unit p-norm."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    u = _as_signal(g, pair.u)[0][:, 0]
    total = float(np.sum(np.abs(u) ** p))
    if total == 0:
        raise ValueError("cannot verify the zero vector")
    # both sides scale by c^(p-1) under u -> c u, so evaluate on u and rescale
    lhs = apply_p_laplacian(g, u, p, floor)
    return float(np.max(np.abs(lhs - pair.lam * phi_p(u, p)))) * total ** ((1.0 - p) / p)


def decomposition_residual(g: SparseGraph, pairs: list[EigenPair], p: float) -> float:
    """max |Delta_p action matrix - Phi_p(U) Lambda Phi_p(U)^T|.

    Column j of the action matrix is Delta_p applied to the j-th basis
    vector; this equals the operator only at p = 2.
    """
    _dense_gate(g)
    if len(pairs) != g.n:
        raise ValueError(f"need {g.n} eigenpairs, got {len(pairs)}")
    action = np.column_stack([apply_p_laplacian(g, e, p) for e in np.eye(g.n)])
    Phi = np.column_stack([phi_p(p_normalize(pr.u, p), p) for pr in pairs])
    lam = np.array([pr.lam for pr in pairs])
    return float(np.max(np.abs(action - (Phi * lam) @ Phi.T)))


def eigenvalue_bound(g: SparseGraph, p: float) -> float:
    """Upper bound on p-eigenvalues; the 1 < p < 2 case uses the max edge count."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    counts = g.edge_counts()
    if p >= 2:
        return 2.0 ** (p - 1.0)
    if p > 1:
        return 2.0 ** (p - 1.0) * math.sqrt(int(counts.max()))
    return math.sqrt(int(counts.min()))


# --------------------------------------------------------------------------
# Filters
# --------------------------------------------------------------------------


def node_gradient_norm(g: SparseGraph, F) -> np.ndarray:
    """||grad f(i)||: Euclidean norm over all slots leaving node i."""
    sq = edge_norms(g, F) ** 2
    return np.sqrt(np.add.reduceat(sq, g.offsets[:-1]))


def regime_threshold(g: SparseGraph, p: float) -> tuple[float, int]:
    """Gradient-norm threshold separating the two regimes, and the N_k used."""
    counts = g.edge_counts()
    if p == 2:
        return math.inf, int(counts.max())
    if p > 2:
        return 2.0 ** ((p - 1.0) / (p - 2.0)), int(counts.max())
    n_k = int(counts.min()) if p == 1 else int(counts.max())
    return 2.0 * (2.0 * math.sqrt(n_k)) ** (1.0 / (p - 2.0)), n_k


def filter_response(g: SparseGraph, F, p: float, mu: float, floor: float = NORM_FLOOR) -> FilterReport:
    """Per-node response alpha_i sum_j M_ij / sqrt(D_i D_j) and its filter regime.

    p > 2: low-high-pass when the gradient norm is at most the threshold,
    otherwise low-pass. p < 2: the reverse. p = 2: always low-high-pass.
    """
    if not p >= 1 or not mu > 0:
        raise ValueError("need p >= 1 and mu > 0")
    M = compute_M(g, F, p, floor)
    alpha, _ = compute_coeffs(g, M, mu, p)
    response = alpha * np.add.reduceat(M * g.sym_norm[:, 0], g.offsets[:-1])
    gn = node_gradient_norm(g, F)
    thr, n_k = regime_threshold(g, p)
    if p == 2:
        regime = ["low-high-pass"] * g.n
    elif p > 2:
        regime = ["low-high-pass" if x <= thr else "low-pass" for x in gn]
    else:
        regime = ["low-pass" if x <= thr else "low-high-pass" for x in gn]
    return FilterReport(gn, response, regime, thr, n_k)


def polynomial_filter(g: SparseGraph, X, mu: float, K: int) -> np.ndarray:
    """(alpha A)^K X + beta sum_{t<K} (alpha A)^t X with dense A = D^{-1/2} W D^{-1/2}.

    alpha = 1 / (1 + mu), beta = mu / (1 + mu): the p = 2 coefficients.
    """
    X, flat = _as_signal(g, X)
    alpha = 1.0 / (1.0 + mu)
    beta = mu * alpha
    T = alpha * normalized_adjacency(g)
    power = np.eye(g.n)
    acc = np.zeros((g.n, g.n))
    for _ in range(K):
        acc += power
        power = power @ T
    out = (power + beta * acc) @ X
    return out[:, 0] if flat else out


def spectral_gain(lam, mu: float, K: int) -> np.ndarray:
    """Frequency response of :func:`polynomial_filter` at Laplacian eigenvalues ``lam``."""
    z = (1.0 - np.asarray(lam, dtype=np.float64)) / (1.0 + mu)
    beta = mu / (1.0 + mu)
    return z**K + beta * sum(z**t for t in range(K))


# --------------------------------------------------------------------------
# Aggregation entropy
# --------------------------------------------------------------------------


def aggregation_entropy(g: SparseGraph, M, alpha, bins: int = 30):
    """Per-node entropy of row-normalized aggregation weights, plus a histogram.

    Returns ``(entropy, counts, bin_edges)``; bins span [0, ln(max degree)].
    """
    M = np.asarray(M, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if M.shape != (g.nnz,) or alpha.shape != (g.n,):
        raise ShapeError("M must have one entry per slot and alpha one per node")
    if (M < 0).any() or (alpha < 0).any():
        raise ValueError("aggregation weights must be nonnegative")
    if bins < 1:
        raise ValueError("bins must be positive")
    A = alpha[g.rows] * M * g.sym_norm[:, 0]
    total = np.add.reduceat(A, g.offsets[:-1])
    safe = np.where(total > 0, total, 1.0)
    P = A / safe[g.rows]
    terms = np.where(P > 0, -P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    H = np.where(total > 0, np.add.reduceat(terms, g.offsets[:-1]), 0.0)
    H = np.maximum(H, 0.0)
    top = max(math.log(int(g.edge_counts().max())), 1e-12)
    counts, edges = np.histogram(np.minimum(H, top), bins=bins, range=(0.0, top))
    return H, counts, edges
