"""Dense double-precision kernels shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Kernels act on
the last two axes, so a stack of matrices with leading batch axes is accepted
wherever a single matrix is.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    return a


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by the counter-based Philox4x64 bit generator.

    Philox output is fully specified by (key, counter), so a seed reproduces the
    same stream on every platform numpy supports.
    """
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check(cond: bool, op: str, a: np.ndarray, b: np.ndarray) -> None:
    if not cond:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def row_softmax(m: np.ndarray, scale: float = 1.0, mask: np.ndarray | None = None) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    z = np.asarray(m, dtype=DTYPE) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check(mask.shape == z.shape[-mask.ndim:], "row_softmax", z, mask)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateRowError("degenerate attention row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def clamped_pow(x, exponent, eps: float):
    """``max(x, eps) ** exponent`` elementwise; a zero exponent gives exactly 1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    exponent = float(exponent)
    base = np.maximum(np.asarray(x, dtype=DTYPE), eps)
    if exponent == 0.0:
        return np.ones_like(base)
    return np.power(base, exponent)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2], "matmul", a, b)
    return np.matmul(a, b)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def concat_rows(*blocks: np.ndarray) -> np.ndarray:
    for blk in blocks[1:]:
        _check(blk.shape[-1] == blocks[0].shape[-1] and blk.shape[:-2] == blocks[0].shape[:-2],
               "concat_rows", blocks[0], blk)
    return np.concatenate(blocks, axis=-2)


def concat_cols(*blocks: np.ndarray) -> np.ndarray:
    for blk in blocks[1:]:
        _check(blk.shape[:-1] == blocks[0].shape[:-1], "concat_cols", blocks[0], blk)
    return np.concatenate(blocks, axis=-1)


def slice_rows(a: np.ndarray, start: int, stop: int) -> np.ndarray:
    if not 0 <= start <= stop <= a.shape[-2]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {tuple(a.shape)}")
    return a[..., start:stop, :]


def row_l2_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def pairwise_dist(u: np.ndarray) -> np.ndarray:
    """``out[..., i, j] = ||u[..., i, :] - u[..., j, :]||``, by explicit differences."""
    diff = u[..., :, None, :] - u[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _elementwise(op: str, fn, a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {tuple(np.shape(a))} vs {tuple(np.shape(b))}") from None
    return fn(a, b)


def add(a, b):
    return _elementwise("add", np.add, a, b)


def sub(a, b):
    return _elementwise("sub", np.subtract, a, b)


def mul(a, b):
    return _elementwise("mul", np.multiply, a, b)


def assert_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite entries in {what}")
    return a
