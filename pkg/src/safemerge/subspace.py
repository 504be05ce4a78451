"""Per-layer alignment operators and projection-based cosine scoring.

The operator for a layer is built from the difference V between aligned and
unaligned weights and applies V V^T / ||V||_F to factored updates. V V^T is
never materialized: products against V run in float64 over fixed-size row
chunks, so no d_out x d_out (or d_in x d_in) buffer ever exists and peak extra
memory stays at a few megabytes regardless of layer size.

Scoring works entirely on r x r Gram matrices. With G = V^T B and H = V G:

    ||delta||_F^2   = sum((B^T B) * (A A^T))
    ||V^T delta||^2 = sum((G^T G) * (A A^T))
    ||V G A||^2     = sum((H^T H) * (A A^T))

and the cosine between delta and its projection reduces to
||V^T delta||^2 / (||delta|| * ||V G A||); both the factor scale and ||V||
cancel, which is why the score is invariant to positive rescaling of either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSubspaceError, DimensionError, NumericError, PairingError
from .tensor_core import LowRankFactors, Matrix

__all__ = [
    "SubspaceOperator",
    "LayerScore",
    "ZERO_DELTA",
    "ORTHOGONAL_DELTA",
    "ZERO_SUBSPACE",
    "alignment_matrix",
    "apply_C",
    "cosine_score",
]

ZERO_DELTA = "zero-delta"
ORTHOGONAL_DELTA = "orthogonal-delta"
ZERO_SUBSPACE = "zero-subspace"

_CHUNK_ROWS = 256


@dataclass(frozen=True, eq=False)
class SubspaceOperator:
    """Alignment matrix V for one layer with its Frobenius norm cached."""

    key: str
    v: Matrix
    v_norm: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape


@dataclass(frozen=True)
class LayerScore:
    """Cosine score in [0, 1]; ``degenerate_reason`` is set iff the value was
    assigned by convention instead of computed."""

    key: str
    rho: float
    degenerate_reason: str | None = None


def _chunked_fro_norm(arr: np.ndarray) -> float:
    total = 0.0
    for lo in range(0, arr.shape[0], _CHUNK_ROWS):
        chunk = arr[lo : lo + _CHUNK_ROWS].astype(np.float64)
        total += float(np.einsum("ij,ij->", chunk, chunk))
    return math.sqrt(total)


def _vt_matmul(v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """V^T @ B in float64, accumulated over row chunks of V."""
    out = np.zeros((v.shape[1], b.shape[1]))
    for lo in range(0, v.shape[0], _CHUNK_ROWS):
        hi = lo + _CHUNK_ROWS
        out += v[lo:hi].astype(np.float64).T @ b[lo:hi].astype(np.float64)
    return out


def _v_matmul(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """V @ G in float64, computed over row chunks of V."""
    out = np.empty((v.shape[0], g.shape[1]))
    for lo in range(0, v.shape[0], _CHUNK_ROWS):
        hi = lo + _CHUNK_ROWS
        out[lo:hi] = v[lo:hi].astype(np.float64) @ g
    return out


def alignment_matrix(w_aligned: Matrix, w_unaligned: Matrix, key: str = "") -> SubspaceOperator:
    """Build the operator from an aligned/unaligned weight pair."""
    if w_aligned.shape != w_unaligned.shape:
        raise PairingError(
            f"{key or 'layer'}: aligned shape {w_aligned.shape} != "
            f"unaligned shape {w_unaligned.shape}"
        )
    v = Matrix(w_aligned.data - w_unaligned.data)
    return SubspaceOperator(key, v, _chunked_fro_norm(v.data))


def _check_compatible(op: SubspaceOperator, factors: LowRankFactors) -> None:
    if op.shape != factors.out_shape:
        raise DimensionError(
            f"{op.key or 'layer'}: operator shape {op.shape} incompatible with "
            f"update shape {factors.out_shape}"
        )


def apply_C(op: SubspaceOperator, factors: LowRankFactors) -> LowRankFactors:
    """Project a factored update: (V (V^T B) / ||V||_F, A, scale)."""
    _check_compatible(op, factors)
    if op.v_norm == 0.0:
        raise DegenerateSubspaceError(f"{op.key or 'layer'}: zero alignment matrix")
    g = _vt_matmul(op.v.data, factors.b.data)
    h = _v_matmul(op.v.data, g) / op.v_norm
    return LowRankFactors(Matrix(h.astype(np.float32)), factors.a, factors.scale)


def cosine_score(op: SubspaceOperator, factors: LowRankFactors, key: str | None = None) -> LayerScore:
    """Cosine similarity between an update and its subspace projection.

    Conventions for degenerate layers: a zero update scores 1 (nothing changed,
    nothing to realign); a zero alignment matrix scores 0 (nothing can be
    certified); a nonzero update orthogonal to the subspace scores 0.
    """
    key = key if key is not None else op.key
    _check_compatible(op, factors)

    a64 = factors.a.data.astype(np.float64)
    aat = a64 @ a64.T
    b64 = factors.b.data.astype(np.float64)
    btb = b64.T @ b64
    delta2 = float(np.sum(btb * aat))
    if factors.scale == 0.0 or delta2 <= 0.0:
        return LayerScore(key, 1.0, ZERO_DELTA)
    if op.v_norm == 0.0:
        return LayerScore(key, 0.0, ZERO_SUBSPACE)

    g = _vt_matmul(op.v.data, factors.b.data)
    num = float(np.sum((g.T @ g) * aat))  # ||V^T delta||_F^2, scale-free
    if num <= 0.0:
        return LayerScore(key, 0.0, ORTHOGONAL_DELTA)
    h = _v_matmul(op.v.data, g)
    proj2 = float(np.sum((h.T @ h) * aat))
    if proj2 <= 0.0:
        return LayerScore(key, 0.0, ORTHOGONAL_DELTA)

    rho = num / math.sqrt(delta2 * proj2)
    if not math.isfinite(rho):
        raise NumericError(f"{key or 'layer'}: non-finite cosine score")
    return LayerScore(key, min(max(rho, 0.0), 1.0))
