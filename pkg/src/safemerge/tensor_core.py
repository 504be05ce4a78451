"""Dense matrices and the factored linear-algebra kernels everything else calls.

Storage is float32 (what checkpoints hold); products and reductions accumulate
in float64 before rounding back, so norms and inner products stay stable even
for large layers. All operations are pure and deterministic: identical inputs
produce bit-identical outputs regardless of thread or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Matrix",
    "LowRankFactors",
    "matmul",
    "frobenius_inner",
    "frobenius_norm",
    "densify",
    "truncated_svd_of_factors",
    "truncated_svd_of_dense",
]


def _as_float32(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class Matrix:
    """Immutable 2-D float32 array with finite entries."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float32(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("matrix contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Matrix:
        return cls(np.zeros((rows, cols), dtype=np.float32))

    @classmethod
    def identity(cls, n: int) -> Matrix:
        return cls(np.eye(n, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """Factored form of a low-rank update: ``scale * (b @ a)``.

    ``b`` is tall (d_out x k), ``a`` is wide (k x d_in). ``scale`` is usually
    positive but zero is legal and denotes a zeroed update.
    """

    b: Matrix
    a: Matrix
    scale: float = 1.0

    def __post_init__(self):
        if self.b.cols != self.a.rows:
            raise DimensionError(
                f"factor shapes disagree: b is {self.b.shape}, a is {self.a.shape}"
            )
        if self.b.cols < 1:
            raise DimensionError("inner rank must be >= 1")
        if not math.isfinite(self.scale):
            raise NumericError("factor scale must be finite")

    @property
    def inner_rank(self) -> int:
        return self.b.cols

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.b.rows, self.a.cols)


def matmul(x: Matrix, y: Matrix) -> Matrix:
    """Matrix product with float64 accumulation, rounded back to float32."""
    if x.cols != y.rows:
        raise DimensionError(f"cannot multiply {x.shape} by {y.shape}")
    out = x.data.astype(np.float64) @ y.data.astype(np.float64)
    return Matrix(out.astype(np.float32))


def frobenius_inner(x: Matrix, y: Matrix) -> float:
    """Sum of elementwise products, accumulated in float64."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.einsum("ij,ij->", x.data, y.data, dtype=np.float64))


def frobenius_norm(x: Matrix) -> float:
    # Defined through frobenius_inner so both share one accumulation path.
    return math.sqrt(frobenius_inner(x, x))


def densify(factors: LowRankFactors) -> Matrix:
    """Materialize ``scale * (b @ a)`` as a dense matrix."""
    out = factors.scale * (
        factors.b.data.astype(np.float64) @ factors.a.data.astype(np.float64)
    )
    return Matrix(out.astype(np.float32))


def truncated_svd_of_factors(
    factors: LowRankFactors, target_rank: int
) -> tuple[LowRankFactors, float]:
    """Best Frobenius rank-``target_rank`` approximation, computed in factored space.

    Orthonormalizes both factors (QR), SVDs the small core, and truncates.
    Cost is O((d_out + d_in) * k^2); the dense matrix is never formed. The
    returned factors absorb the singular values as a sqrt split on each side
    and carry scale 1. The second return value is the Frobenius norm of the
    discarded part, i.e. sqrt of the discarded singular values' energy.

    ``target_rank >= k`` returns the input unchanged with error 0.
    """
    d_out, d_in = factors.out_shape
    if target_rank < 1:
        raise DimensionError("target_rank must be >= 1")
    if target_rank > min(d_out, d_in):
        raise DimensionError(
            f"target_rank {target_rank} exceeds min dimension {min(d_out, d_in)}"
        )
    if target_rank >= factors.inner_rank:
        return factors, 0.0

    b64 = factors.b.data.astype(np.float64)
    a64 = factors.a.data.astype(np.float64)
    qb, rb = np.linalg.qr(b64)
    qa, ra = np.linalg.qr(a64.T)
    core = factors.scale * (rb @ ra.T)
    u, s, vt = np.linalg.svd(core, full_matrices=False)

    t = min(target_rank, s.size)
    sq = np.sqrt(s[:t])
    b_new = (qb @ u[:, :t]) * sq
    a_new = (sq[:, None] * vt[:t]) @ qa.T
    err = float(np.sqrt(np.sum(s[t:] ** 2)))
    return (
        LowRankFactors(Matrix(b_new.astype(np.float32)), Matrix(a_new.astype(np.float32)), 1.0),
        err,
    )


def truncated_svd_of_dense(m: Matrix, target_rank: int) -> tuple[LowRankFactors, float]:
    """Rank-``target_rank`` factorization of a dense matrix via full SVD.

    Used where masking has already destroyed any factored structure; for
    factored inputs prefer :func:`truncated_svd_of_factors`.
    """
    if target_rank < 1:
        raise DimensionError("target_rank must be >= 1")
    if target_rank > min(m.rows, m.cols):
        raise DimensionError(
            f"target_rank {target_rank} exceeds min dimension {min(m.rows, m.cols)}"
        )
    u, s, vt = np.linalg.svd(m.data.astype(np.float64), full_matrices=False)
    t = min(target_rank, s.size)
    sq = np.sqrt(s[:t])
    b_new = u[:, :t] * sq
    a_new = sq[:, None] * vt[:t]
    err = float(np.sqrt(np.sum(s[t:] ** 2)))
    return (
        LowRankFactors(Matrix(b_new.astype(np.float32)), Matrix(a_new.astype(np.float32)), 1.0),
        err,
    )
