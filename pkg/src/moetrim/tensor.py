"""Dense float32 kernels shared by the engine, analysis and slimming code.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every matmul
goes through :func:`matmul` so that :func:`count_flops` can tally
multiply-adds for the analytic cost cross-check.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from moetrim.errors import ArgumentError, ShapeError

DTYPE = np.float32

_flop_counter: contextvars.ContextVar[list | None] = contextvars.ContextVar("flop_counter", default=None)


@contextlib.contextmanager
def count_flops():
    """Count matmul FLOPs (2 per multiply-add) issued inside the block.

    >>> with count_flops() as c:
    ...     _ = matmul(np.ones((2, 3), np.float32), np.ones((3, 4), np.float32))
    >>> c[0]
    48
    """
    cell = [0]
    token = _flop_counter.set(cell)
    try:
        yield cell
    finally:
        _flop_counter.reset(token)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]`` with float32 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    cell = _flop_counter.get()
    if cell is not None:
        cell[0] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return np.matmul(a, b, dtype=DTYPE)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w.T`` for weights stored as ``[out, in]``."""
    return matmul(x, w.T)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z, dtype=DTYPE)
    return e / np.sum(e, axis=axis, keepdims=True, dtype=DTYPE)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ordered by decreasing value; equal values resolve to the lower index.
    """
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ArgumentError(f"top-k needs 1 <= k <= {n}, got k={k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def softmax_topk(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over ``logits`` followed by top-k selection.

    Returns ``(indices, probs)`` where ``probs`` covers every entry.
    """
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"softmax_topk expects a vector, got shape {logits.shape}")
    if not 1 <= k <= logits.shape[0]:
        raise ArgumentError(f"k={k} out of range for {logits.shape[0]} logits")
    probs = softmax(logits)
    return topk_indices(probs, k), probs


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rms_norm width {x.shape[-1]} != gain width {gain.shape[-1]}")
    ms = np.mean(np.square(x, dtype=DTYPE), axis=-1, keepdims=True, dtype=DTYPE)
    return (x / np.sqrt(ms + DTYPE(eps))) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (DTYPE(1.0) + np.exp(-x, dtype=DTYPE))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine in float64; rows with a zero norm come back as NaN.

    Uses ``dot / sqrt(|a|^2 |b|^2)`` so identical rows give exactly 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = np.einsum("...i,...i->...", a, b)
    denom = np.sqrt(np.einsum("...i,...i->...", a, a) * np.einsum("...i,...i->...", b, b))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), np.nan)
    return np.clip(cos, -1.0, 1.0)
