"""Dense float64 kernels shared by the runtime and the reduction policies.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major).
Random draws go through ``numpy.random.Generator`` on the PCG64 bit generator,
so a seed reproduces the same stream on every platform numpy supports.
"""

from __future__ import annotations

import math

import numpy as np

NORM_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m, mask=None) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    ``mask`` is a boolean array broadcastable to ``m``; ``True`` marks entries
    that take part in normalisation (e.g. a lower-triangular causal mask).
    """
    m = np.asarray(m, dtype=np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row is fully masked and cannot be normalised")
        m = np.where(mask, m, -np.inf)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"cosine_similarity length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    # zero vectors score 0 so top-k selection never sees NaN
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def adjacent_cosine(rows) -> np.ndarray:
    """Cosine similarity of every consecutive row pair (vectorised)."""
    rows = as_matrix(rows)
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    dots = np.einsum("ij,ij->i", rows[:-1], rows[1:])
    denom = norms[:-1] * norms[1:]
    ok = (norms[:-1] >= NORM_EPS) & (norms[1:] >= NORM_EPS)
    out = np.zeros(rows.shape[0] - 1 if rows.shape[0] else 0)
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def randn_matrix(rng: np.random.Generator, rows: int, cols: int, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.standard_normal((rows, cols)) * std


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    centered = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", centered, centered)[..., None] / x.shape[-1]
    return centered * (gain / np.sqrt(var + eps)) + bias


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    inner = x * x
    inner *= 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    np.tanh(inner, out=inner)
    inner += 1.0
    inner *= x
    inner *= 0.5
    return inner
