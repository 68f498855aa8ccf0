"""Bottleneck adapters and p-adapters over the augmented attention graph."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .attention import AugmentedAttention
from .graph import EPS_NORM, build_graph
from .message_passing import AggregationStrategy, aggregate, alpha_beta, p_normalize, propagate_renormalized

P_MODES = ("learnable", "fixed")
ACTIVATIONS = {"relu": ag.relu, "identity": lambda x: x}


@dataclass
class Adapter:
    w_down: ag.Var  # l1 x l2
    w_up: ag.Var  # l2 x l1
    activation: str = "relu"

    def __post_init__(self):
        if not isinstance(self.w_down, ag.Var):
            self.w_down = ag.Var(self.w_down, requires_grad=True)
        if not isinstance(self.w_up, ag.Var):
            self.w_up = ag.Var(self.w_up, requires_grad=True)
        l1, l2 = self.w_down.shape
        if self.w_up.shape != (l2, l1):
            raise ValueError(f"w_up must be {l2}x{l1}, got {self.w_up.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng: np.random.Generator, l1: int, l2: int, std: float = 1e-2, activation: str = "relu"):
        """Small random down-projection and zero up-projection (identity at init)."""
        if not 0 < l2 < l1:
            raise ValueError(f"adapter hidden width must satisfy 0 < l2 < l1, got l1={l1}, l2={l2}")
        return cls(rng.standard_normal((l1, l2)) * std, np.zeros((l2, l1)), activation)

    @property
    def l1(self) -> int:
        return self.w_down.shape[0]

    @property
    def l2(self) -> int:
        return self.w_down.shape[1]

    def parameters(self) -> list:
        return [self.w_down, self.w_up]


@dataclass
class PAdapter:
    adapter: Adapter
    rho: ag.Var = field(default_factory=lambda: ag.Var(np.zeros(1), requires_grad=True))
    mu: float = 1.0
    eps: float = EPS_NORM
    p_mode: str = "learnable"
    p_fixed: float = 1.5
    strategy: AggregationStrategy = field(default_factory=AggregationStrategy)

    def __post_init__(self):
        if self.p_mode not in P_MODES:
            raise ValueError(f"unknown p_mode {self.p_mode!r}")
        if self.p_mode == "fixed" and self.p_fixed < 1:
            raise ValueError("fixed p must be >= 1")
        if not isinstance(self.rho, ag.Var):
            self.rho = ag.Var(np.reshape(self.rho, (1,)), requires_grad=self.p_mode == "learnable")
        if self.p_mode == "fixed":
            self.rho.requires_grad = False

    def parameters(self) -> list:
        params = self.adapter.parameters()
        if self.p_mode == "learnable" and self.strategy.kind == "p_laplacian":
            params.append(self.rho)
        return params


def adapter_forward(U, a: Adapter):
    """``act(U W_down) W_up + U``."""
    if ag.value(U).shape[-1] != a.l1:
        raise ValueError(f"adapter expects width {a.l1}, got {ag.value(U).shape}")
    act = ACTIVATIONS[a.activation]
    return ag.add(ag.matmul(act(ag.matmul(U, a.w_down)), a.w_up), U)


def adapter_after_attention(attn_output, a: Adapter):
    return adapter_forward(attn_output, a)


def augmented_adapter_forward(aug: AugmentedAttention, a: Adapter):
    """Adapter applied to ``M~ V^`` over all N1+N2 nodes."""
    return adapter_forward(ag.matmul(aug.m_tilde, aug.v_hat), a)


def effective_p(pa: PAdapter):
    """``1 + sigmoid(rho)`` in learnable mode (a Var in (1, 2)), else the fixed float."""
    if pa.p_mode == "fixed":
        return float(pa.p_fixed)
    return ag.add(1.0, ag.sigmoid(pa.rho))


def _finite(x, stage: str):
    if not np.all(np.isfinite(ag.value(x))):
        raise FloatingPointError(f"p-adapter stage {stage}: non-finite values")
    return x


def p_adapter_forward(aug: AugmentedAttention, pa: PAdapter, details: dict | None = None):
    """Calibrate ``M~`` by p-Laplacian renormalization, aggregate ``V^``, encode, keep query rows.

    Returns the ``N1 x l1`` query block.  When ``details`` is given it receives the
    graph, ``mbar``, ``alpha``, ``beta`` and ``u_bar`` for inspection.
    """
    g = build_graph(aug)
    _finite(g.degrees, "(1) graph")
    p = effective_p(pa)
    mbar = _finite(p_normalize(g, g.features, p, pa.eps), "(2) renormalization")
    alpha, beta = alpha_beta(mbar, g.degrees, p, pa.mu)
    _finite(alpha, "(3) alpha/beta")
    u_bar = _finite(propagate_renormalized(g, mbar, alpha, beta, g.features, g.features), "(4) aggregation")
    u_prime = _finite(adapter_forward(u_bar, pa.adapter), "(5) encoding")
    if details is not None:
        details.update(graph=g, mbar=mbar, alpha=alpha, beta=beta, u_bar=u_bar, p=p)
    return ag.slice_rows(u_prime, 0, aug.n_query)


def graph_adapter_forward(aug: AugmentedAttention, pa: PAdapter, details: dict | None = None):
    """Attention-slot adapter with the aggregation chosen by ``pa.strategy``.

    ``p_laplacian`` is the p-adapter itself.  For ``gcnii`` the bottleneck branch is
    scaled by the identity-mix weight: ``U + beta_c act(U W_down) W_up``.
    """
    kind = pa.strategy.kind
    if kind == "p_laplacian":
        return p_adapter_forward(aug, pa, details)
    g = build_graph(aug)
    u_bar = aggregate(pa.strategy, g, g.features)
    if kind == "gcnii":
        a = pa.adapter
        branch = ag.matmul(ACTIVATIONS[a.activation](ag.matmul(u_bar, a.w_down)), a.w_up)
        u_prime = ag.add(u_bar, ag.mul(branch, pa.strategy.gcnii_beta))
    else:
        u_prime = adapter_forward(u_bar, pa.adapter)
    if details is not None:
        details.update(graph=g, u_bar=u_bar)
    return ag.slice_rows(u_prime, 0, aug.n_query)


def param_count(obj) -> dict:
    """Trainable/frozen parameter counts for an adapter, p-adapter or model."""
    if isinstance(obj, Adapter):
        trainable, frozen = sum(p.value.size for p in obj.parameters()), 0
    elif isinstance(obj, PAdapter):
        trainable, frozen = sum(p.value.size for p in obj.parameters()), 0
    else:
        trainable = sum(p.value.size for p in obj.parameters())
        frozen = obj.n_frozen_params
    total = trainable + frozen
    return {"trainable": int(trainable), "frozen": int(frozen),
            "fraction": trainable / total if total else 0.0}
