"""Independent reference implementations used as test oracles.

Everything here recomputes results by the most literal route available
(elementwise loops, dense materialization, full SVD) and must stay decoupled
from the library's own code paths.
"""

import math

import numpy as np


def naive_matmul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], y.shape[1]), dtype=np.float64)
    for i in range(x.shape[0]):
        for j in range(y.shape[1]):
            acc = 0.0
            for k in range(x.shape[1]):
                acc += float(x[i, k]) * float(y[k, j])
            out[i, j] = acc
    return out


def loop_frobenius_inner(x: np.ndarray, y: np.ndarray) -> float:
    acc = 0.0
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            acc += float(x[i, j]) * float(y[i, j])
    return acc


def dense_projector(v: np.ndarray) -> np.ndarray:
    """Materialized C = V V^T / ||V||_F (the thing the library must never build)."""
    v64 = v.astype(np.float64)
    norm = math.sqrt(loop_frobenius_inner(v64, v64))
    return (v64 @ v64.T) / norm


def dense_apply(v: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return dense_projector(v) @ delta.astype(np.float64)


def dense_rho(v: np.ndarray, delta: np.ndarray) -> float:
    """Cosine between delta and its dense projection; no degenerate handling."""
    d64 = delta.astype(np.float64)
    projected = dense_apply(v, delta)
    num = float(np.sum(d64 * projected))
    den = math.sqrt(float(np.sum(d64 * d64))) * math.sqrt(float(np.sum(projected * projected)))
    return num / den


def svd_tail_error(dense: np.ndarray, target_rank: int) -> float:
    """Frobenius error of the best rank-t approximation, from a full SVD."""
    s = np.linalg.svd(dense.astype(np.float64), compute_uv=False)
    return float(np.sqrt(np.sum(s[target_rank:] ** 2)))


def best_rank_t(dense: np.ndarray, target_rank: int) -> np.ndarray:
    u, s, vt = np.linalg.svd(dense.astype(np.float64), full_matrices=False)
    t = target_rank
    return (u[:, :t] * s[:t]) @ vt[:t]


def ties_reference(t_f: np.ndarray, t_s: np.ndarray, density: float) -> np.ndarray:
    """Scripted trim / elect / disjoint-merge, elementwise and step by step."""

    def trim(t: np.ndarray) -> np.ndarray:
        flat = t.ravel().astype(np.float64)
        k = math.ceil(density * flat.size)
        # rank by (-magnitude, index): lower index wins magnitude ties
        ranked = sorted(range(flat.size), key=lambda i: (-abs(flat[i]), i))
        out = np.zeros_like(flat)
        for i in ranked[:k]:
            out[i] = flat[i]
        return out.reshape(t.shape)

    tf, ts = trim(t_f), trim(t_s)
    out = np.zeros(t_f.shape, dtype=np.float64)
    for idx in np.ndindex(t_f.shape):
        total = tf[idx] + ts[idx]
        elected = 1.0 if total >= 0 else -1.0
        acc, count = 0.0, 0
        for value in (tf[idx], ts[idx]):
            if value != 0.0 and math.copysign(1.0, value) == elected:
                acc += value
                count += 1
        out[idx] = acc / count if count else 0.0
    return out
