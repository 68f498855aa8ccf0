"""Attention graphs and the discrete operators defined on them.

Node functions are ``N x d`` matrices; edge functions are ``N x N x d``
tensors indexed ``[i, j]`` for the edge from node ``i`` to node ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import numeric as nc
from .attention import AugmentedAttention

EPS_DEG = 1e-12
EPS_NORM = 1e-8


@dataclass
class AttentionGraph:
    adjacency: object  # N x N symmetric, nonnegative (ndarray or Var)
    features: object  # N x d
    degrees: object  # length-N vector, clamped below at eps_deg
    n_query: int
    n_value: int
    eps_deg: float = EPS_DEG

    @property
    def n_nodes(self) -> int:
        return self.n_query + self.n_value

    @property
    def A(self) -> np.ndarray:
        return ag.value(self.adjacency)

    @property
    def D(self) -> np.ndarray:
        return ag.value(self.degrees)

    @property
    def X(self) -> np.ndarray:
        return ag.value(self.features)


def _validate_adjacency(a: np.ndarray, tol: float = 1e-12) -> None:
    if a.shape[-1] != a.shape[-2]:
        raise nc.ShapeError(f"adjacency must be square, got {a.shape}")
    asym = np.max(np.abs(a - nc.transpose(a))) if a.size else 0.0
    if asym > tol:
        raise ValueError(f"adjacency is not symmetric (max |A - A^T| = {asym:.3e})")
    if np.any(a < 0):
        raise ValueError("adjacency has negative entries")


def graph_from_adjacency(adjacency, features, n_query: int | None = None, eps_deg: float = EPS_DEG) -> AttentionGraph:
    a = ag.value(adjacency)
    _validate_adjacency(a)
    n = a.shape[-1]
    if ag.value(features).shape[-2] != n:
        raise nc.ShapeError(f"features {ag.value(features).shape} do not match {n} nodes")
    degrees = ag.maximum(ag.reduce_sum(adjacency, axis=-1), eps_deg)
    nq = n if n_query is None else n_query
    return AttentionGraph(adjacency, features, degrees, nq, n - nq, eps_deg)


def build_graph(aug: AugmentedAttention, eps_deg: float = EPS_DEG) -> AttentionGraph:
    return graph_from_adjacency(aug.m_tilde, aug.v_hat, aug.n_query, eps_deg)


def laplacian(g: AttentionGraph) -> np.ndarray:
    return np.diag(g.D) - g.A


def normalized_adjacency(g: AttentionGraph):
    """``D^{-1/2} A D^{-1/2}`` (tape-aware)."""
    inv_sqrt = ag.div(1.0, ag.sqrt(g.degrees))
    return ag.col_scale(ag.diag_scale(inv_sqrt, g.adjacency), inv_sqrt)


def graph_gradient(g: AttentionGraph, F: np.ndarray) -> np.ndarray:
    """``grad[i, j] = sqrt(A_ij / D_jj) F_j - sqrt(A_ij / D_ii) F_i``."""
    A, D, F = g.A, g.D, np.asarray(F, dtype=nc.DTYPE)
    to_j = np.sqrt(A / D[None, :])[:, :, None] * F[None, :, :]
    from_i = np.sqrt(A / D[:, None])[:, :, None] * F[:, None, :]
    return to_j - from_i


def divergence(g: AttentionGraph, edge_fn: np.ndarray) -> np.ndarray:
    """``div(v) = sum_u sqrt(A_uv / D_vv) (g(e_vu) - g(e_uv))``."""
    A, D = g.A, g.D
    w = np.sqrt(A / D[:, None])  # w[v, u] = sqrt(A_vu / D_vv)
    flux = edge_fn - np.swapaxes(edge_fn, 0, 1)  # flux[v, u] = g(e_vu) - g(e_uv)
    return np.einsum("vu,vud->vd", w, flux)


def p_laplacian_apply(g: AttentionGraph, F: np.ndarray, p: float, eps: float = EPS_NORM) -> np.ndarray:
    """Element-wise-norm graph p-Laplacian applied to vector-valued ``F``.

    ``out_i = sum_j |grad[i,j]|^{p-2} (A_ij / sqrt(D_ii)) (F_i / sqrt(D_ii) - F_j / sqrt(D_jj))``
    with the norm clamped below at ``eps``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    A, D, F = g.A, g.D, np.asarray(F, dtype=nc.DTYPE)
    norms = np.linalg.norm(graph_gradient(g, F), axis=-1)
    weight = nc.clamped_pow(norms, p - 2.0, eps) * A / np.sqrt(D)[:, None]
    scaled = F / np.sqrt(D)[:, None]
    return weight.sum(axis=1)[:, None] * scaled - weight @ scaled


def variation(g: AttentionGraph, F: np.ndarray, p: float) -> float:
    """``S_p(F) = 1/2 sum_ij ||sqrt(A_ij/D_jj) F_j - sqrt(A_ij/D_ii) F_i||^p`` (matrix form)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    norms = np.linalg.norm(graph_gradient(g, F), axis=-1)
    return 0.5 * float(np.sum(norms ** p))


def variation_edges(g: AttentionGraph, F: np.ndarray, p: float) -> float:
    """Same quantity summed over the directed edge list ``{(i, j): A_ij > 0}``."""
    A, D, F = g.A, g.D, np.asarray(F, dtype=nc.DTYPE)
    total = 0.0
    for i, j in zip(*np.nonzero(A > 0)):
        e = np.sqrt(A[i, j] / D[j]) * F[j] - np.sqrt(A[i, j] / D[i]) * F[i]
        total += float(np.sqrt(e @ e)) ** p
    return 0.5 * total


def regularization_objective(g: AttentionGraph, F: np.ndarray, X: np.ndarray, p: float, mu: float) -> float:
    if mu <= 0:
        raise ValueError("mu must be positive")
    diff = np.asarray(F, dtype=nc.DTYPE) - np.asarray(X, dtype=nc.DTYPE)
    return variation(g, F, p) + mu * float(np.sum(diff * diff))


def _cosine(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1)
    if np.any(norms <= 1e-12):
        raise ValueError("homophily needs non-degenerate node features")
    U = X / norms[:, None]
    return U @ U.T


def _mean_offdiag(c: np.ndarray) -> float:
    n = c.shape[0]
    if n < 2:
        return 1.0
    return float((c.sum() - np.trace(c)) / (n * (n - 1)))


def homophily_metrics(g: AttentionGraph) -> dict:
    """Adjacency-weighted mean edge cosine similarity and mean within-class cosines."""
    X, A = g.X, g.A
    C = _cosine(X)
    nq = g.n_query
    return {
        "edge_homophily": float(np.sum(A * C) / np.sum(A)),
        "intra_query": _mean_offdiag(C[:nq, :nq]),
        "intra_value": _mean_offdiag(C[nq:, nq:]),
    }
