"""Multi-head attention and the symmetric augmented attention construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import numeric as nc

CONCAT_MODES = ("query", "zero", "noise")


@dataclass
class AttentionWeights:
    """Frozen projections.  Head ``i`` uses column block ``i`` of ``w_q``/``w_k``/``w_v``."""

    w_q: np.ndarray  # d_k x d_k
    w_k: np.ndarray  # d_k x d_k
    w_v: np.ndarray  # d_v x d_v
    w_o: np.ndarray  # d_v x d_v
    n_heads: int

    def __post_init__(self):
        d_k, d_v = self.w_q.shape[0], self.w_v.shape[0]
        if d_k % self.n_heads or d_v % self.n_heads:
            raise ValueError(f"d_k={d_k} and d_v={d_v} must be divisible by n_heads={self.n_heads}")
        if self.w_q.shape != (d_k, d_k) or self.w_k.shape != (d_k, d_k):
            raise nc.ShapeError(f"w_q/w_k must be {d_k}x{d_k}, got {self.w_q.shape}, {self.w_k.shape}")
        if self.w_v.shape != (d_v, d_v) or self.w_o.shape != (d_v, d_v):
            raise nc.ShapeError(f"w_v/w_o must be {d_v}x{d_v}, got {self.w_v.shape}, {self.w_o.shape}")

    @classmethod
    def random(cls, rng: np.random.Generator, d_k: int, d_v: int, n_heads: int, std: float | None = None):
        sk = 1.0 / np.sqrt(d_k) if std is None else std
        sv = 1.0 / np.sqrt(d_v) if std is None else std
        return cls(rng.standard_normal((d_k, d_k)) * sk, rng.standard_normal((d_k, d_k)) * sk,
                   rng.standard_normal((d_v, d_v)) * sv, rng.standard_normal((d_v, d_v)) * sv, n_heads)

    def head_blocks(self, i: int):
        hk = self.w_q.shape[0] // self.n_heads
        hv = self.w_v.shape[0] // self.n_heads
        return (self.w_q[:, i * hk:(i + 1) * hk], self.w_k[:, i * hk:(i + 1) * hk],
                self.w_v[:, i * hv:(i + 1) * hv])

    @property
    def n_params(self) -> int:
        return sum(w.size for w in (self.w_q, self.w_k, self.w_v, self.w_o))


@dataclass
class AttentionIntermediate:
    heads: list  # per-head M^i, N1 x N2
    q_proj: object  # Q W_q, head-concatenated (N1 x d_k)
    v_proj: object  # V W_v, head-concatenated (N2 x d_v)
    m_avg: object
    mask: np.ndarray | None
    w_o: np.ndarray

    @property
    def n_query(self) -> int:
        return ag.value(self.m_avg).shape[-2]

    @property
    def n_value(self) -> int:
        return ag.value(self.m_avg).shape[-1]


@dataclass
class AugmentedAttention:
    v_tilde: object  # (N1+N2) x d
    m_tilde: object  # (N1+N2) x (N1+N2)
    v_hat: object  # v_tilde @ W_o
    concat_mode: str
    n_query: int
    n_value: int
    m: object  # head-averaged attention N1 x N2


def causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("causal_mask needs n >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q, k, v, weights: AttentionWeights, mask=None):
    """Multi-head attention; returns ``(output, intermediate)``.

    Scores of head ``i`` are scaled by ``1/sqrt(d_k / n)``.
    """
    qv, kv, vv = ag.value(q), ag.value(k), ag.value(v)
    d_k, d_v = weights.w_q.shape[0], weights.w_v.shape[0]
    if qv.shape[-1] != d_k or kv.shape[-1] != d_k or vv.shape[-1] != d_v or kv.shape[-2] != vv.shape[-2]:
        raise nc.ShapeError(f"attention: Q{qv.shape}, K{kv.shape}, V{vv.shape} do not fit d_k={d_k}, d_v={d_v}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (qv.shape[-2], kv.shape[-2]):
            raise nc.ShapeError(f"attention: mask {mask.shape} vs scores {(qv.shape[-2], kv.shape[-2])}")
    scale = 1.0 / np.sqrt(d_k // weights.n_heads)
    heads, outs, q_parts, v_parts = [], [], [], []
    for i in range(weights.n_heads):
        wq, wk, wv = weights.head_blocks(i)
        qi, ki, vi = ag.matmul(q, wq), ag.matmul(k, wk), ag.matmul(v, wv)
        m_i = ag.row_softmax(ag.matmul(qi, ag.transpose(ki)), scale, mask)
        heads.append(m_i)
        outs.append(ag.matmul(m_i, vi))
        q_parts.append(qi)
        v_parts.append(vi)
    m_avg = heads[0]
    for m_i in heads[1:]:
        m_avg = ag.add(m_avg, m_i)
    if weights.n_heads > 1:
        m_avg = ag.mul(m_avg, 1.0 / weights.n_heads)
    concat = ag.concat_cols(*outs) if len(outs) > 1 else outs[0]
    output = ag.matmul(concat, weights.w_o)
    q_proj = ag.concat_cols(*q_parts) if len(q_parts) > 1 else q_parts[0]
    v_proj = ag.concat_cols(*v_parts) if len(v_parts) > 1 else v_parts[0]
    return output, AttentionIntermediate(heads, q_proj, v_proj, m_avg, mask, weights.w_o)


def augment_matrix(m):
    """``[[0, M], [M^T, 0]]`` over the last two axes."""
    mv = ag.value(m)
    n1, n2 = mv.shape[-2:]
    lead = mv.shape[:-2]
    top = ag.concat_cols(np.zeros(lead + (n1, n1)), m)
    bottom = ag.concat_cols(ag.transpose(m), np.zeros(lead + (n2, n2)))
    return ag.concat_rows(top, bottom)


def augment(inter: AttentionIntermediate, mode: str = "query", rng: np.random.Generator | None = None) -> AugmentedAttention:
    if mode not in CONCAT_MODES:
        raise ValueError(f"unknown concat mode {mode!r}; expected one of {CONCAT_MODES}")
    qv, vv = ag.value(inter.q_proj), ag.value(inter.v_proj)
    if qv.shape[-1] != vv.shape[-1]:
        raise nc.ShapeError(f"augment: query width {qv.shape[-1]} != value width {vv.shape[-1]}")
    if mode == "query":
        top = inter.q_proj
    elif mode == "zero":
        top = np.zeros(qv.shape)
    else:
        if rng is None:
            raise ValueError("noise concat mode needs an rng")
        top = rng.standard_normal(qv.shape)
    v_tilde = ag.concat_rows(top, inter.v_proj)
    m_tilde = augment_matrix(inter.m_avg)
    return AugmentedAttention(v_tilde, m_tilde, ag.matmul(v_tilde, inter.w_o), mode,
                              qv.shape[-2], vv.shape[-2], inter.m_avg)


def averaged_output(inter: AttentionIntermediate):
    """``M_avg (V W_v) W_o``: the single-graph reading of multi-head attention.

    Coincides with the multi-head output when there is one head.
    """
    return ag.matmul(ag.matmul(inter.m_avg, inter.v_proj), inter.w_o)
