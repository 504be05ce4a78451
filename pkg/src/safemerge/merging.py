"""Layer-level merge strategies.

Linear merging is exact in factored space: the weighted sum of two rank-r
updates is represented as one rank-2r update by concatenating scaled factors.
DARE and TIES operate on densified deltas (masking and sign election destroy
factored structure), then re-factorize per the requested rank mode:

  - ``concat``   exact factored weighted sum, rank r_f + r_s (linear only)
  - ``restore``  truncated SVD back to a target rank, reconstruction error reported
  - ``dense``    the dense delta itself, encoded as (B=delta, A=identity)

Also provides the projection baseline (replace an update with its image under
the alignment operator, applied to the B factor only) and negated-task-vector
merging (subtract an alpha-weighted harmful update from a fine-tuned one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter_io import LoraLayer
from .errors import PairingError, PolicyError
from .rng import keyed_generator, validate_seed
from .subspace import SubspaceOperator, apply_C
from .tensor_core import (
    LowRankFactors,
    Matrix,
    densify,
    truncated_svd_of_dense,
    truncated_svd_of_factors,
)

__all__ = [
    "LINEAR",
    "DARE_LINEAR",
    "TIES",
    "STRATEGIES",
    "CONCAT",
    "RESTORE",
    "DENSE",
    "RANK_MODES",
    "MergePolicy",
    "merge_linear",
    "merge_dare_linear",
    "merge_ties",
    "safelora_project",
    "resta_merge",
    "negate_lora",
    "dare_mask",
    "ties_combine",
]

LINEAR = "linear"
DARE_LINEAR = "dare_linear"
TIES = "ties"
STRATEGIES = (LINEAR, DARE_LINEAR, TIES)

CONCAT = "concat"
RESTORE = "restore"
DENSE = "dense"
RANK_MODES = (CONCAT, RESTORE, DENSE)

_MASKED_STRATEGIES = (DARE_LINEAR, TIES)


@dataclass(frozen=True)
class MergePolicy:
    """Everything a merge run needs to know.

    ``w_f``/``w_s`` are the fine-tuned and safe weights; the canonical setting
    is (alpha, 1 - alpha) but arbitrary non-negative pairs are accepted.
    ``target_rank`` = None in restore mode means: the fine-tuned layer's rank.
    """

    strategy: str = LINEAR
    w_f: float = 0.8
    w_s: float = 0.2
    density: float = 1.0
    seed: int = 0
    tau: float = 0.5
    rank_mode: str = CONCAT
    target_rank: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PolicyError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.rank_mode not in RANK_MODES:
            raise PolicyError(f"unknown rank mode {self.rank_mode!r}; expected one of {RANK_MODES}")
        _check_weights(self.w_f, self.w_s)
        _check_density(self.density)
        validate_seed(self.seed)
        if not (math.isfinite(self.tau) and 0.0 <= self.tau <= 1.0):
            raise PolicyError(f"tau must lie in [0, 1], got {self.tau}")
        if self.target_rank is not None and self.target_rank < 1:
            raise PolicyError(f"target_rank must be >= 1, got {self.target_rank}")
        if self.strategy in _MASKED_STRATEGIES and self.rank_mode == CONCAT:
            raise PolicyError(
                f"{self.strategy} cannot use concat rank mode: elementwise masking "
                "destroys the factored low-rank structure; use restore or dense"
            )

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "w_f": self.w_f,
            "w_s": self.w_s,
            "density": self.density,
            "seed": self.seed,
            "tau": self.tau,
            "rank_mode": self.rank_mode,
            "target_rank": self.target_rank,
        }


def _check_weights(w_f: float, w_s: float) -> None:
    for name, w in (("w_f", w_f), ("w_s", w_s)):
        if not (math.isfinite(w) and w >= 0.0):
            raise PolicyError(f"{name} must be a non-negative real, got {w}")


def _check_density(density: float) -> None:
    if not (math.isfinite(density) and 0.0 < density <= 1.0):
        raise PolicyError(f"density must lie in (0, 1], got {density}")


def _check_same_shape(x: LoraLayer, y: LoraLayer) -> None:
    if x.out_shape != y.out_shape:
        raise PairingError(
            f"{x.key}: delta shapes disagree: {x.out_shape} vs {y.out_shape}"
        )


def _layer_from_factors(key: str, factors: LowRankFactors) -> LoraLayer:
    b = factors.b
    if factors.scale != 1.0:
        b = Matrix(factors.b.data * np.float32(factors.scale))
    rank = factors.inner_rank
    return LoraLayer(key, factors.a, b, rank, float(rank))  # scaling == 1


def _dense_layer(key: str, delta: Matrix) -> LoraLayer:
    d_in = delta.cols
    return LoraLayer(key, Matrix.identity(d_in), delta, d_in, float(d_in))


def _stacked(parts: list[tuple[LoraLayer, float]]) -> LowRankFactors:
    """Exact factored form of sum_i coeff_i * delta_i, rank = sum of ranks."""
    b_blocks = [
        (layer.b.data.astype(np.float64) * (coeff * layer.scaling)).astype(np.float32)
        for layer, coeff in parts
    ]
    a_blocks = [layer.a.data for layer, _ in parts]
    return LowRankFactors(
        Matrix(np.concatenate(b_blocks, axis=1)),
        Matrix(np.concatenate(a_blocks, axis=0)),
        1.0,
    )


def _merge_weighted(
    key: str,
    parts: list[tuple[LoraLayer, float]],
    rank_mode: str,
    target_rank: int | None,
    fallback_rank: int,
) -> tuple[LoraLayer, float]:
    if rank_mode == CONCAT:
        return _layer_from_factors(key, _stacked(parts)), 0.0
    if rank_mode == DENSE:
        # the literal dense sum of the densified deltas (same arithmetic as
        # the masked strategies at density 1)
        combined = sum(
            coeff * layer.delta().data.astype(np.float64) for layer, coeff in parts
        )
        return _dense_layer(key, Matrix(combined.astype(np.float32))), 0.0
    reduced, err = truncated_svd_of_factors(_stacked(parts), target_rank or fallback_rank)
    return _layer_from_factors(key, reduced), err


def _finish_dense(
    key: str,
    delta64: np.ndarray,
    rank_mode: str,
    target_rank: int | None,
    fallback_rank: int,
) -> tuple[LoraLayer, float]:
    dense = Matrix(delta64.astype(np.float32))
    if rank_mode == DENSE:
        return _dense_layer(key, dense), 0.0
    reduced, err = truncated_svd_of_dense(dense, target_rank or fallback_rank)
    return _layer_from_factors(key, reduced), err


def merge_linear(
    f_fine: LoraLayer,
    f_safe: LoraLayer,
    w_f: float,
    w_s: float,
    rank_mode: str = CONCAT,
    target_rank: int | None = None,
) -> tuple[LoraLayer, float]:
    """w_f * delta_f + w_s * delta_s; exact at rank r_f + r_s in concat mode."""
    _check_weights(w_f, w_s)
    _check_same_shape(f_fine, f_safe)
    parts = [(f_fine, w_f), (f_safe, w_s)]
    return _merge_weighted(f_fine.key, parts, rank_mode, target_rank, f_fine.rank)


def dare_mask(delta: np.ndarray, density: float, seed: int, layer_key: str, source_tag: str) -> np.ndarray:
    """Drop-and-rescale: keep each element with probability ``density`` and
    rescale survivors by 1/density, so the expectation equals ``delta``.

    The Bernoulli draw comes from the stream keyed by (seed, layer, source),
    making masks reproducible and independent of evaluation order.
    """
    _check_density(density)
    gen = keyed_generator(seed, layer_key, "dare", source_tag)
    keep = gen.random(delta.shape) < density
    return np.where(keep, delta.astype(np.float64) / density, 0.0)


def merge_dare_linear(
    f_fine: LoraLayer,
    f_safe: LoraLayer,
    w_f: float,
    w_s: float,
    density: float,
    seed: int,
    rank_mode: str = RESTORE,
    target_rank: int | None = None,
) -> tuple[LoraLayer, float]:
    """Linear merge of independently drop-and-rescaled deltas."""
    _check_weights(w_f, w_s)
    _check_density(density)
    _check_same_shape(f_fine, f_safe)
    if rank_mode == CONCAT:
        raise PolicyError(
            "dare_linear cannot use concat rank mode: elementwise masking "
            "destroys the factored low-rank structure; use restore or dense"
        )
    masked_f = dare_mask(f_fine.delta().data, density, seed, f_fine.key, "fine_tuned")
    masked_s = dare_mask(f_safe.delta().data, density, seed, f_fine.key, "safe")
    combined = w_f * masked_f + w_s * masked_s
    return _finish_dense(f_fine.key, combined, rank_mode, target_rank, f_fine.rank)


def ties_trim(t: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * N) largest-magnitude elements, zero the rest.

    Magnitude ties are broken by keeping the lower flat index first.
    """
    _check_density(density)
    flat = t.ravel()
    k = math.ceil(density * flat.size)
    # stable sort on descending magnitude preserves index order among ties
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = np.zeros_like(flat)
    out[order] = flat[order]
    return out.reshape(t.shape)


def ties_combine(t_f: np.ndarray, t_s: np.ndarray, density: float) -> np.ndarray:
    """Trim both sources, elect a per-element sign, and average the trimmed
    values whose sign matches the election (zero when none match)."""
    trimmed_f = ties_trim(t_f, density)
    trimmed_s = ties_trim(t_s, density)
    elected = np.where(trimmed_f + trimmed_s >= 0.0, 1.0, -1.0)  # 0 counts as positive
    match_f = (np.sign(trimmed_f) == elected) & (trimmed_f != 0.0)
    match_s = (np.sign(trimmed_s) == elected) & (trimmed_s != 0.0)
    total = np.where(match_f, trimmed_f, 0.0) + np.where(match_s, trimmed_s, 0.0)
    count = match_f.astype(np.float64) + match_s.astype(np.float64)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def merge_ties(
    f_fine: LoraLayer,
    f_safe: LoraLayer,
    w_f: float,
    w_s: float,
    density: float,
    rank_mode: str = RESTORE,
    target_rank: int | None = None,
) -> tuple[LoraLayer, float]:
    """Trim / elect-sign / disjoint-merge on the weight-scaled dense deltas."""
    _check_weights(w_f, w_s)
    _check_same_shape(f_fine, f_safe)
    if rank_mode == CONCAT:
        raise PolicyError(
            "ties cannot use concat rank mode: trimming and sign election "
            "destroy the factored low-rank structure; use restore or dense"
        )
    t_f = w_f * f_fine.delta().data.astype(np.float64)
    t_s = w_s * f_safe.delta().data.astype(np.float64)
    combined = ties_combine(t_f, t_s, density)
    return _finish_dense(f_fine.key, combined, rank_mode, target_rank, f_fine.rank)


def safelora_project(f_fine: LoraLayer, op: SubspaceOperator) -> LoraLayer:
    """Replace the update with its subspace projection.

    Only the B factor is projected — C (B A) = (C B) A — so the rank and the
    lora_alpha of the layer are unchanged.
    """
    projected = apply_C(op, LowRankFactors(f_fine.b, f_fine.a, 1.0))
    return LoraLayer(f_fine.key, f_fine.a, projected.b, f_fine.rank, f_fine.lora_alpha)


def negate_lora(layer: LoraLayer, which: str = "b") -> LoraLayer:
    """Flip the sign of one factor; involutive and bit-exact."""
    if which == "b":
        return LoraLayer(layer.key, layer.a, Matrix(-layer.b.data), layer.rank, layer.lora_alpha)
    if which == "a":
        return LoraLayer(layer.key, Matrix(-layer.a.data), layer.b, layer.rank, layer.lora_alpha)
    raise PolicyError(f"negation target must be 'a' or 'b', got {which!r}")


def resta_merge(
    f_sft: LoraLayer,
    f_harm: LoraLayer,
    alpha_resta: float,
    dare: tuple[float, int] | None = None,
    rank_mode: str = CONCAT,
    target_rank: int | None = None,
    negate: str = "b",
) -> tuple[LoraLayer, float]:
    """delta_sft + alpha * delta_harm_negated, optionally DARE-masking the
    negated harmful delta first."""
    if not (math.isfinite(alpha_resta) and alpha_resta > 0.0):
        raise PolicyError(f"alpha must be positive, got {alpha_resta}")
    _check_same_shape(f_sft, f_harm)
    negated = negate_lora(f_harm, negate)
    if dare is None:
        parts = [(f_sft, 1.0), (negated, alpha_resta)]
        return _merge_weighted(f_sft.key, parts, rank_mode, target_rank, f_sft.rank)
    if rank_mode == CONCAT:
        raise PolicyError(
            "DARE-masked merging cannot use concat rank mode: masking destroys "
            "the factored low-rank structure; use restore or dense"
        )
    density, seed = dare
    masked = dare_mask(negated.delta().data, density, seed, f_sft.key, "negated_harmful")
    combined = f_sft.delta().data.astype(np.float64) + alpha_resta * masked
    return _finish_dense(f_sft.key, combined, rank_mode, target_rank, f_sft.rank)
