"""Spectral propagation, p-Laplacian message passing and its iterative solver."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import numeric as nc
from .graph import EPS_NORM, AttentionGraph, normalized_adjacency, regularization_objective

AGGREGATIONS = ("gcn", "appnp", "gcnii", "p_laplacian")

# Test hook: multiplies every renormalized adjacency.  Only cmd_verify's fault
# injection changes it.
_MBAR_SCALE = 1.0


@contextlib.contextmanager
def inject_mbar_fault(scale: float = 1.01):
    global _MBAR_SCALE
    old, _MBAR_SCALE = _MBAR_SCALE, scale
    try:
        yield
    finally:
        _MBAR_SCALE = old


class SolverError(RuntimeError):
    pass


@dataclass
class PLaplacianConfig:
    p: float = 1.5
    mu: float = 1.0
    eps: float = EPS_NORM
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


@dataclass
class AggregationStrategy:
    kind: str = "p_laplacian"
    appnp_alpha: float = 0.1
    appnp_steps: int = 2
    gcnii_alpha: float = 0.1
    gcnii_beta: float = 0.5
    p_cfg: PLaplacianConfig = field(default_factory=PLaplacianConfig)

    def __post_init__(self):
        if self.kind not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}; expected one of {AGGREGATIONS}")
        # appnp_alpha = 1 is accepted: pure teleport is a useful degenerate case
        for name in ("appnp_alpha", "gcnii_alpha", "gcnii_beta"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.appnp_steps < 1:
            raise ValueError("appnp_steps must be >= 1")


def gcn_propagate(C, X, W, activation=None):
    """``activation(C X W)``; identity when ``activation`` is None."""
    out = ag.matmul(ag.matmul(C, X), W)
    return out if activation is None else activation(out)


def gcn_matrix(g: AttentionGraph) -> np.ndarray:
    """``D^{-1/2} (2I - L) D^{-1/2}`` with ``L = D - A``."""
    D = g.D
    L = np.diag(D) - g.A
    inv = 1.0 / np.sqrt(D)
    return inv[:, None] * (2.0 * np.eye(len(D)) - L) * inv[None, :]


def p_normalize(g: AttentionGraph, F, p, eps: float = EPS_NORM):
    """Renormalized adjacency ``A_ij * max(||sqrt(A_ij/D_ii) F_i - sqrt(A_ij/D_jj) F_j||, eps)^(p-2)``.

    ``p`` may be a float or a scalar Var (learnable p).  Uses the identity
    ``||...|| = sqrt(A_ij) ||F_i/sqrt(D_ii) - F_j/sqrt(D_jj)||``.
    """
    A = g.adjacency
    scaled = ag.diag_scale(ag.div(1.0, ag.sqrt(g.degrees)), F)
    edge_norms = ag.mul(ag.sqrt(A), ag.pairwise_dist(scaled))
    mbar = ag.mul(A, ag.clamped_pow(edge_norms, ag.sub(p, 2.0), eps))
    if _MBAR_SCALE != 1.0:
        mbar = ag.mul(mbar, _MBAR_SCALE)
    return mbar


def alpha_beta(mbar, degrees, p, mu: float):
    """Diagonals of alpha and beta, returned as vectors."""
    two_mu_p = ag.div(2.0 * mu, p)
    alpha = ag.div(1.0, ag.add(ag.div(ag.reduce_sum(mbar, axis=-1), degrees), two_mu_p))
    beta = ag.mul(two_mu_p, alpha)
    return alpha, beta


def propagate_renormalized(g: AttentionGraph, mbar, alpha, beta, F, anchor):
    """``alpha D^{-1/2} Mbar D^{-1/2} F + beta anchor``."""
    inv_sqrt = ag.div(1.0, ag.sqrt(g.degrees))
    s_bar = ag.col_scale(ag.diag_scale(inv_sqrt, mbar), inv_sqrt)
    return ag.add(ag.diag_scale(alpha, ag.matmul(s_bar, F)), ag.diag_scale(beta, anchor))


def p_step(g: AttentionGraph, X_anchor, F, cfg: PLaplacianConfig, p=None):
    """One p-Laplacian message-passing step; ``p`` overrides ``cfg.p`` (may be a Var)."""
    p = cfg.p if p is None else p
    mbar = p_normalize(g, F, p, cfg.eps)
    alpha, beta = alpha_beta(mbar, g.degrees, p, cfg.mu)
    return propagate_renormalized(g, mbar, alpha, beta, F, X_anchor)


@dataclass
class SolveResult:
    F: np.ndarray
    trace: list
    iterations: int
    rel_change: float
    converged: bool


def p_solve(g: AttentionGraph, X, cfg: PLaplacianConfig) -> SolveResult:
    """Iterate ``F <- p_step(g, X, F)`` from ``F = X`` until the relative Frobenius change
    drops below ``cfg.tol`` or ``cfg.max_iter`` steps have run."""
    X = np.asarray(X, dtype=nc.DTYPE)
    F = X.copy()
    trace = [regularization_objective(g, F, X, cfg.p, cfg.mu)]
    rel = math.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        F_new = p_step(g, X, F, cfg)
        if not np.all(np.isfinite(F_new)):
            raise SolverError(f"non-finite features at iteration {it}")
        rel = float(np.linalg.norm(F_new - F) / max(np.linalg.norm(F), 1e-300))
        F = F_new
        trace.append(regularization_objective(g, F, X, cfg.p, cfg.mu))
        if rel < cfg.tol:
            break
    if trace[-1] > trace[0] * (1 + 1e-12) + 1e-12:
        raise SolverError(f"objective increased: {trace[0]:.6g} -> {trace[-1]:.6g}")
    return SolveResult(F, trace, it, rel, rel < cfg.tol)


def aggregate(strategy: AggregationStrategy, g: AttentionGraph, X, p=None):
    """Node aggregation for one adapter slot.

    ``gcnii`` returns only the initial-residual mix; the identity-mapped weight is
    applied by the adapter.
    """
    kind = strategy.kind
    if kind == "p_laplacian":
        return p_step(g, X, X, strategy.p_cfg, p)
    S = normalized_adjacency(g)
    if kind == "gcn":
        return ag.matmul(S, X)
    if kind == "appnp":
        a = strategy.appnp_alpha
        Z = X
        for _ in range(strategy.appnp_steps):
            Z = ag.add(ag.mul(ag.matmul(S, Z), 1.0 - a), ag.mul(X, a))
        return Z
    if kind == "gcnii":
        a = strategy.gcnii_alpha
        return ag.add(ag.mul(ag.matmul(S, X), 1.0 - a), ag.mul(X, a))
    raise ValueError(f"unknown aggregation kind {kind!r}")


def frequency_energy(g: AttentionGraph, F) -> dict:
    """Energy of ``F`` in the low / mid / high bands of ``I - D^{-1/2} A D^{-1/2}``.

    Low and high bands hold the ``ceil(N/4)`` smallest and largest eigenvalues.
    """
    n = g.n_nodes
    if n > 512:
        raise ValueError(f"frequency_energy supports N <= 512, got {n}")
    S = ag.value(normalized_adjacency(g))
    lap = np.eye(n) - S
    lap = 0.5 * (lap + lap.T)
    try:
        evals, evecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    F = np.asarray(ag.value(F), dtype=nc.DTYPE)
    if F.ndim == 1:
        F = F[:, None]
    coef = evecs.T @ F
    per_mode = np.sum(coef * coef, axis=1)
    k = math.ceil(n / 4)
    total = float(np.sum(F * F))
    raw = per_mode.sum()
    norm = total / raw if raw > 0 else 0.0
    low = float(per_mode[:k].sum() * norm)
    high = float(per_mode[n - k:].sum() * norm)
    return {"low": low, "mid": total - low - high, "high": high, "total": total,
            "eigenvalues": evals.tolist()}
