"""A small reverse-mode tape over dense float64 arrays.

Usage::

    w = Var(w0, requires_grad=True)
    with Tape():
        loss = reduce_sum(square(sub(matmul(w, x), y)))
    (dw,) = grad(loss, [w])

Every primitive accepts ``Var`` or array-like arguments.  When no argument is a
``Var`` the primitive returns a plain ``ndarray``, so code written against this
module also runs as ordinary numpy.  Forward values always come from the
kernels in :mod:`padapter.numeric`.

Conventions: ``relu'(0) = 0``; ``clamped_pow``, ``maximum`` and ``sqrt``/norms at
exactly zero pass no gradient through the clamped/kinked point.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numeric as nc

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("padapter_tape", default=None)


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of primitive applications; backward visits it once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(eq=False)
class _Node:
    out: "Var"
    parents: list  # (Var, vjp) pairs


class Var:
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected operators
    __slots__ = ("value", "requires_grad", "grad", "_tape")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=nc.DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._tape: Tape | None = None

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    T = property(lambda self: transpose(self))

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return mul(self, -1.0)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=nc.DTYPE)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(out_value: np.ndarray, parents: Sequence[tuple[object, Callable]]):
    """Wrap a primitive's result, recording it when a gradient could flow."""
    vars_in = [(p, fn) for p, fn in parents if isinstance(p, Var)]
    if not vars_in:
        return out_value
    out = Var(out_value)
    tape = _ACTIVE.get()
    live = [(p, fn) for p, fn in vars_in if p.requires_grad]
    if tape is not None and live:
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, live))
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    va, vb = value(a), value(b)
    return _emit(nc.add(va, vb), [(a, lambda g: _unbroadcast(g, va.shape)),
                                  (b, lambda g: _unbroadcast(g, vb.shape))])


def sub(a, b):
    va, vb = value(a), value(b)
    return _emit(nc.sub(va, vb), [(a, lambda g: _unbroadcast(g, va.shape)),
                                  (b, lambda g: _unbroadcast(-g, vb.shape))])


def mul(a, b):
    va, vb = value(a), value(b)
    return _emit(nc.mul(va, vb), [(a, lambda g: _unbroadcast(g * vb, va.shape)),
                                  (b, lambda g: _unbroadcast(g * va, vb.shape))])


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _emit(out, [(a, lambda g: _unbroadcast(g / vb, va.shape)),
                       (b, lambda g: _unbroadcast(-g * out / vb, vb.shape))])


def square(a):
    return mul(a, a)


def relu(a):
    va = value(a)
    return _emit(np.maximum(va, 0.0), [(a, lambda g: g * (va > 0))])


def sigmoid(a):
    va = value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * va))
    return _emit(out, [(a, lambda g: g * out * (1.0 - out))])


def exp(a):
    out = np.exp(value(a))
    return _emit(out, [(a, lambda g: g * out)])


def log(a):
    va = value(a)
    return _emit(np.log(va), [(a, lambda g: g / va)])


def sqrt(a):
    out = np.sqrt(value(a))
    safe = np.where(out > 0, out, 1.0)
    return _emit(out, [(a, lambda g: np.where(out > 0, g / (2.0 * safe), 0.0))])


def maximum(a, floor: float):
    """Clamp from below by a constant; gradient passes only where ``a > floor``."""
    va = value(a)
    return _emit(np.maximum(va, floor), [(a, lambda g: g * (va > floor))])


def clamped_pow(x, exponent, eps: float):
    """``max(x, eps) ** exponent``; ``exponent`` may itself be a (scalar) Var."""
    vx = value(x)
    ve = value(exponent)
    e = float(ve.item()) if ve.size == 1 else float(ve)
    out = nc.clamped_pow(vx, e, eps)
    base = np.maximum(vx, eps)
    live = vx > eps

    def dx(g):
        if e == 0.0:
            return np.zeros_like(g)
        return g * e * np.where(live, out / base, 0.0)

    def de(g):
        return np.sum(g * out * np.log(base)).reshape(ve.shape)

    return _emit(out, [(x, dx), (exponent, de)])


# ---------------------------------------------------------------- structural

def matmul(a, b):
    va, vb = value(a), value(b)
    return _emit(nc.matmul(va, vb),
                 [(a, lambda g: _unbroadcast(np.matmul(g, nc.transpose(vb)), va.shape)),
                  (b, lambda g: _unbroadcast(np.matmul(nc.transpose(va), g), vb.shape))])


def transpose(a):
    return _emit(nc.transpose(value(a)), [(a, nc.transpose)])


def reshape(a, shape):
    va = value(a)
    return _emit(va.reshape(shape), [(a, lambda g: g.reshape(va.shape))])


def concat(parts: Sequence, axis: int):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def piece(k):
        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[k], bounds[k + 1])
            return g[tuple(idx)]
        return fn

    return _emit(out, [(p, piece(k)) for k, p in enumerate(parts)])


def concat_rows(*parts):
    nc.concat_rows(*[value(p) for p in parts])  # shape validation only
    return concat(parts, axis=-2)


def concat_cols(*parts):
    nc.concat_cols(*[value(p) for p in parts])
    return concat(parts, axis=-1)


def slice_rows(a, start: int, stop: int):
    va = value(a)
    out = nc.slice_rows(va, start, stop)

    def fn(g):
        full = np.zeros_like(va)
        full[..., start:stop, :] = g
        return full

    return _emit(out, [(a, fn)])


def reduce_sum(a, axis=None, keepdims: bool = False):
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape).copy()

    return _emit(np.asarray(out), [(a, fn)])


def diag_scale(vec, m):
    """Scale row ``i`` of ``m`` by ``vec[i]`` (``diag(vec) @ m``)."""
    return mul(reshape(vec, value(vec).shape + (1,)), m)


def col_scale(m, vec):
    """Scale column ``j`` of ``m`` by ``vec[j]`` (``m @ diag(vec)``)."""
    vv = value(vec)
    return mul(m, reshape(vec, vv.shape[:-1] + (1,) + vv.shape[-1:]))


# ---------------------------------------------------------------- reductions with kinks

def row_softmax(a, scale: float = 1.0, mask=None):
    out = nc.row_softmax(value(a), scale, mask)

    def fn(g):
        return scale * out * (g - np.sum(g * out, axis=-1, keepdims=True))

    return _emit(out, [(a, fn)])


def row_l2_norms(a):
    va = value(a)
    out = nc.row_l2_norms(va)
    safe = np.where(out > 0, out, 1.0)
    return _emit(out, [(a, lambda g: np.where(out > 0, g / safe, 0.0)[..., None] * va)])


def pairwise_dist(u):
    """Row-pair distances ``||u_i - u_j||`` over the last two axes."""
    vu = value(u)
    out = nc.pairwise_dist(vu)

    def fn(g):
        w = np.where(out > 0, g / np.where(out > 0, out, 1.0), 0.0)
        w = w + nc.transpose(w)
        return w.sum(axis=-1)[..., None] * vu - np.matmul(w, vu)

    return _emit(out, [(u, fn)])


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under row-softmax ``logits``.

    ``weights`` (same shape as ``targets``) selects/weights positions; the mean is
    taken over the weight total.
    """
    vl = value(logits)
    t = np.asarray(targets, dtype=np.int64)
    w = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=nc.DTYPE)
    z = vl - vl.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    total = w.sum()
    out = np.asarray(-(picked * w).sum() / total).reshape(1, 1)

    def fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return g.item() * (p - onehot) * (w / total)[..., None]

    return _emit(out, [(logits, fn)])


# ---------------------------------------------------------------- backward

def grad(loss, params: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a 1x1 ``loss`` with respect to ``params``; consumes the tape."""
    lv = value(loss)
    if lv.size != 1:
        raise TapeError(f"grad needs a scalar loss, got shape {lv.shape}")
    tape = loss._tape if isinstance(loss, Var) else None
    if tape is None:
        return [np.zeros_like(p.value) for p in params]
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(lv)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            gp = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    tape.consumed = True
    tape.nodes.clear()
    out = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=nc.DTYPE).reshape(p.value.shape)
        p.grad = g
        out.append(g)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    tol: float
    passed: bool
    per_param: list = field(default_factory=list)


def check_gradients(f: Callable, params: Sequence, h: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*params)`` to central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-8, 1e-4]")
    base = [value(p).copy() for p in params]
    vars_ = [Var(b, requires_grad=True) for b in base]
    with Tape():
        loss = f(*vars_)
    analytic = grad(loss, vars_)
    errs, per_param = [], []
    for k, b in enumerate(base):
        num = np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            args = list(base)
            plus, minus = b.copy(), b.copy()
            plus[idx] += h
            minus[idx] -= h
            args[k] = plus
            fp = float(value(f(*args)).item())
            args[k] = minus
            fm = float(value(f(*args)).item())
            num[idx] = (fp - fm) / (2.0 * h)
        rel = np.abs(analytic[k] - num) / np.maximum(np.maximum(np.abs(analytic[k]), np.abs(num)), 1e-8)
        per_param.append(float(rel.max()) if rel.size else 0.0)
        errs.append(rel.ravel())
    allerr = np.concatenate(errs) if errs else np.zeros(1)
    mx = float(allerr.max())
    return GradCheckReport(mx, float(allerr.mean()), tol, mx < tol, per_param)
