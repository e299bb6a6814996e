"""p-Laplacian regularisation and the message-passing iteration that solves it.

The objective is ``S_p(F) + mu * ||F - X||^2``. One step recomputes the
edge weights ``M`` and node coefficients ``alpha``, ``beta`` from the
current ``F`` and then sets

    F'_i = alpha_i * sum_j M_ij / sqrt(D_ii D_jj) * F_j + beta_i * X_i

:func:`mp_step` and :func:`run_smoother` work on arrays; :func:`propagate`
is the same update on autodiff Vars, used inside the pGNN model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, NumericalError, ShapeError
from .graph import (
    NORM_FLOOR,
    SparseGraph,
    _as_signal,
    _dense_gate,
    dense_laplacian,
    norm_power,
    normalized_adjacency,
    variation_sp,
)


@dataclass(frozen=True)
class PlapConfig:
    p: float = 2.0
    mu: float = 0.1
    K: int = 6
    norm_floor: float = NORM_FLOOR
    detach_weights: bool = False

    def __post_init__(self):
        if not self.p >= 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if not self.mu > 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        if not self.norm_floor > 0:
            raise ConfigError("norm_floor must be positive")


@dataclass
class IterState:
    F: np.ndarray
    M: np.ndarray | None = None
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    k: int = 0
    trace: list[float] = field(default_factory=list)
    residual: float = float("nan")


def objective(g: SparseGraph, F, X, p: float, mu: float) -> float:
    F, _ = _as_signal(g, F)
    X, _ = _as_signal(g, X)
    if F.shape != X.shape:
        raise ShapeError(f"F has shape {F.shape}, X has {X.shape}")
    return variation_sp(g, F, p) + mu * float(np.sum((F - X) ** 2))


def compute_M(g: SparseGraph, F, p: float, norm_floor: float = NORM_FLOOR) -> np.ndarray:
    """Per-slot weights W_ij * ||grad F([i, j])||^(p-2).

    Computed once per undirected edge and mirrored onto the reverse slot.
    Exact-zero norms give M = 0 when p < 2.
    """
    if p == 2:
        return g.weights.copy()
    F, _ = _as_signal(g, F)
    s = g.edge_slots
    scaled = F / g.sqrt_degrees
    diff = g.sqrt_weights[s] * (scaled[g.neighbors[s]] - scaled[g.rows[s]])
    norms = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    half = g.weights[s] * norm_power(norms, p - 2.0, norm_floor)
    M = np.empty(g.nnz)
    M[s] = half
    M[g.reverse[s]] = half
    return M


def compute_coeffs(g: SparseGraph, M: np.ndarray, mu: float, p: float) -> tuple[np.ndarray, np.ndarray]:
    if not mu > 0:
        raise ConfigError(f"mu must be > 0, got {mu}")
    reset = 2.0 * mu / p
    alpha = 1.0 / (np.add.reduceat(M, g.offsets[:-1]) / g.degrees + reset)
    return alpha, reset * alpha


def _aggregate(g: SparseGraph, M: np.ndarray, F: np.ndarray) -> np.ndarray:
    coef = (M * g.sym_norm[:, 0])[:, None]
    return np.add.reduceat(coef * F[g.neighbors], g.offsets[:-1], axis=0)


def mp_step(g: SparseGraph, state: IterState, X, cfg: PlapConfig) -> IterState:
    X, _ = _as_signal(g, X)
    F = state.F
    M = compute_M(g, F, cfg.p, cfg.norm_floor)
    alpha, beta = compute_coeffs(g, M, cfg.mu, cfg.p)
    F_new = alpha[:, None] * _aggregate(g, M, F) + beta[:, None] * X
    trace = state.trace + [objective(g, F_new, X, cfg.p, cfg.mu)]
    return IterState(
        F=F_new,
        M=M,
        alpha=alpha,
        beta=beta,
        k=state.k + 1,
        trace=trace,
        residual=float(np.max(np.abs(F_new - F))),
    )


def initial_state(g: SparseGraph, X, cfg: PlapConfig) -> IterState:
    X, _ = _as_signal(g, X)
    return IterState(F=X.copy(), trace=[objective(g, X, X, cfg.p, cfg.mu)])


def run_smoother(g: SparseGraph, X, cfg: PlapConfig) -> tuple[np.ndarray, list[float]]:
    """K message-passing steps from F = X; returns (F, objective trace of length K+1)."""
    X, flat = _as_signal(g, X)
    state = initial_state(g, X, cfg)
    for _ in range(cfg.K):
        state = mp_step(g, state, X, cfg)
        if not np.all(np.isfinite(state.F)):
            raise NumericalError(f"non-finite embedding after step {state.k}")
    F = state.F[:, 0] if flat else state.F
    return F, state.trace


def closed_form_p2(g: SparseGraph, X, mu: float) -> np.ndarray:
    """mu (Delta_2 + mu I)^{-1} X by a dense solve."""
    _dense_gate(g)
    X, flat = _as_signal(g, X)
    A = dense_laplacian(g) + mu * np.eye(g.n)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"factorization failed: {exc}") from exc
    out = mu * np.linalg.solve(L.T, np.linalg.solve(L, X))
    return out[:, 0] if flat else out


def ppr_matrix(g: SparseGraph, mu: float) -> np.ndarray:
    """Personalized-PageRank matrix mu (Delta_2 + mu I)^{-1}."""
    return closed_form_p2(g, np.eye(g.n), mu)


def ppr_recursion(g: SparseGraph, mu: float, tol: float = 1e-14, max_iters: int = 100_000) -> np.ndarray:
    """Power iteration pi <- alpha A pi + beta I from pi = I, alpha = 1/(1+mu).

    Iterates until the largest entry change is at most ``tol``.
    Column ``i`` is the PPR vector restarting at node ``i``.
    """
    alpha = 1.0 / (1.0 + mu)
    beta = 1.0 - alpha
    A = normalized_adjacency(g)
    eye = np.eye(g.n)
    pi = eye.copy()
    for _ in range(max_iters):
        nxt = alpha * (A @ pi) + beta * eye
        done = np.abs(nxt - pi).max() <= tol
        pi = nxt
        if done:
            return pi
    raise NumericalError(f"PPR recursion did not reach tol {tol} in {max_iters} iterations")


# --------------------------------------------------------------------------
# Differentiable propagation
# --------------------------------------------------------------------------


def _edge_weights_var(g: SparseGraph, F: ad.Var, cfg: PlapConfig) -> ad.Var:
    s = g.edge_slots
    scaled = F / g.sqrt_degrees
    diff = (ad.gather_rows(scaled, g.neighbors[s]) - ad.gather_rows(scaled, g.rows[s])) * g.sqrt_weights[s]
    norms = ad.row_l2_norm(diff)
    powered = ad.pow_clamped(norms, cfg.p - 2.0, cfg.norm_floor)
    if cfg.p < 2:
        powered = powered * (norms.value > 0)
    half = powered * g.weights[s][:, None]
    # slot order: each slot takes its undirected edge's value
    edge_of_slot = np.empty(g.nnz, dtype=np.int64)
    edge_of_slot[s] = np.arange(s.size)
    edge_of_slot[g.reverse[s]] = np.arange(s.size)
    return ad.gather_rows(half, edge_of_slot)


def propagation_matrix(g: SparseGraph, M: np.ndarray, alpha: np.ndarray) -> sp.csr_matrix:
    """Sparse ``diag(alpha) D^{-1/2} M D^{-1/2}`` in the graph's CSR layout."""
    data = alpha[g.rows] * M * g.sym_norm[:, 0]
    return sp.csr_matrix((data, g.neighbors, g.offsets), shape=(g.n, g.n))


def frozen_weights(g: SparseGraph, F0, cfg: PlapConfig) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-step ``(M, alpha, beta)`` of a propagation from ``F0``, as arrays.

    Passing these back to :func:`propagate` evaluates the surrogate whose
    exact gradient is the detached-weights gradient at ``F0``.
    """
    F0 = np.asarray(F0, dtype=np.float64)
    out = []
    F = F0
    for _ in range(cfg.K):
        M = compute_M(g, F, cfg.p, cfg.norm_floor)
        alpha, beta = compute_coeffs(g, M, cfg.mu, cfg.p)
        out.append((M, alpha[:, None], beta[:, None]))
        F = alpha[:, None] * _aggregate(g, M, F) + beta[:, None] * F0
    return out


def propagate(g: SparseGraph, F0: ad.Var, cfg: PlapConfig, frozen=None) -> ad.Var:
    """K differentiable message-passing steps with reset signal ``F0``.

    With ``cfg.detach_weights`` the weights M, alpha, beta are computed from
    the current values and treated as constants. At p = 2 they never depend
    on F, so both modes coincide. ``frozen`` (from :func:`frozen_weights`)
    supplies fixed weights for every step instead.
    """
    reset = 2.0 * cfg.mu / cfg.p
    inv_deg = (1.0 / g.degrees)[:, None]
    constant = frozen is not None or cfg.p == 2 or cfg.detach_weights
    F = F0
    P = None
    for step in range(cfg.K):
        if constant:
            if frozen is not None:
                M, alpha, beta = frozen[step]
                P = propagation_matrix(g, M, alpha[:, 0])
            elif P is None or cfg.p != 2:
                # at p = 2 the weights are fixed, so build P once
                M = compute_M(g, F.value, cfg.p, cfg.norm_floor)
                alpha = 1.0 / (np.add.reduceat(M, g.offsets[:-1])[:, None] * inv_deg + reset)
                beta = reset * alpha
                P = propagation_matrix(g, M, alpha[:, 0])
            F = ad.sparse_matmul(P, F) + F0 * beta
        else:
            M = _edge_weights_var(g, F, cfg)
            alpha = 1.0 / (ad.segment_sum(M, g.offsets) * inv_deg + reset)
            beta = alpha * reset
            agg = ad.segment_sum(ad.gather_rows(F, g.neighbors) * (M * g.sym_norm), g.offsets)
            F = agg * alpha + F0 * beta
    return F
