"""End-to-end runs: score every layer, decide, merge or project the flagged
ones, and emit the output bundle plus a machine-readable report.

Per-layer work is independent and runs under a bounded thread pool; results
are assembled in input order, and all randomness is keyed per layer, so output
is bit-identical for any worker count. Scores depend only on the fine-tuned
adapter and the weight pair, never on the policy, which is what lets sweeps
reuse one scoring pass across the whole grid.
"""

from __future__ import annotations

import csv
import json
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

from . import __version__
from .adapter_io import AdapterBundle, LoraLayer
from .errors import MissingKeyError, PolicyError
from .merging import (
    CONCAT,
    DARE_LINEAR,
    LINEAR,
    RESTORE,
    TIES,
    MergePolicy,
    merge_dare_linear,
    merge_linear,
    merge_ties,
    resta_merge,
    safelora_project,
)
from .subspace import ZERO_SUBSPACE, LayerScore, SubspaceOperator, alignment_matrix, cosine_score
from .tensor_core import frobenius_norm

__all__ = [
    "LayerDecision",
    "MergeReport",
    "EvalScores",
    "LayerScorer",
    "SweepGrid",
    "run_safemerge",
    "run_safelora",
    "run_resta",
    "run_analyze",
    "sweep",
    "safety_score",
    "write_report_json",
    "write_sweep_csv",
]


@dataclass
class LayerDecision:
    """What happened to one layer."""

    key: str
    rho: float | None
    merged: bool
    strategy: str | None = None
    w_f: float | None = None
    w_s: float | None = None
    rank_out: int | None = None
    reconstruction_error: float = 0.0
    degenerate_reason: str | None = None
    note: str | None = None
    delta_norm_before: float | None = None
    delta_norm_after: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "key": self.key,
            "rho": self.rho,
            "merged": self.merged,
            "strategy": self.strategy,
            "w_f": self.w_f,
            "w_s": self.w_s,
            "rank_out": self.rank_out,
            "reconstruction_error": self.reconstruction_error,
            "degenerate_reason": self.degenerate_reason,
            "note": self.note,
            "delta_norm_before": self.delta_norm_before,
            "delta_norm_after": self.delta_norm_after,
        }


@dataclass
class MergeReport:
    mode: str
    decisions: list[LayerDecision]
    policy: dict | None
    input_digests: dict[str, str]
    heterogeneous_rank: bool = False
    tool_version: str = __version__

    @property
    def total_count(self) -> int:
        return len(self.decisions)

    @property
    def merged_count(self) -> int:
        return sum(1 for d in self.decisions if d.merged)

    def mean_rho(self) -> float | None:
        rhos = [d.rho for d in self.decisions if d.rho is not None]
        return sum(rhos) / len(rhos) if rhos else None

    def to_json_dict(self) -> dict:
        return {
            "tool": {"name": "safemerge", "version": self.tool_version},
            "mode": self.mode,
            "policy": self.policy,
            "inputs": self.input_digests,
            "total_count": self.total_count,
            "merged_count": self.merged_count,
            "heterogeneous_rank": self.heterogeneous_rank,
            "decisions": [d.to_json_dict() for d in self.decisions],
        }


def write_report_json(report: MergeReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
    return path


def write_report_csv(report: MergeReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = [
        "key",
        "rho",
        "merged",
        "strategy",
        "rank_out",
        "reconstruction_error",
        "degenerate_reason",
        "note",
    ]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for d in report.decisions:
            writer.writerow({k: v for k, v in d.to_json_dict().items() if k in fields})
    return path


@dataclass(frozen=True)
class EvalScores:
    """Harmful-output rates from the two safety benchmarks, in percent."""

    direct_harm: float
    hexphi: float

    def __post_init__(self):
        for name, v in (("direct_harm", self.direct_harm), ("hexphi", self.hexphi)):
            if not 0.0 <= v <= 100.0:
                raise PolicyError(f"{name} must lie in [0, 100], got {v}")


def safety_score(scores: EvalScores) -> float:
    """Mean of the two complements: ((100 - d) + (100 - h)) / 2."""
    return ((100.0 - scores.direct_harm) + (100.0 - scores.hexphi)) / 2.0


class LayerScorer:
    """Scores fine-tuned layers against a weight pair, caching per-key results.

    Weight pairs load lazily one key at a time; operators are rebuilt on
    demand and never retained, so memory stays at a few layer matrices.
    ``compute_count`` tracks how many scores were actually computed (cache
    misses), which sweeps use to prove they score each layer exactly once.
    """

    def __init__(self, aligned, unaligned, key_map=None):
        self._aligned = aligned
        self._unaligned = unaligned
        self._key_map = key_map or (lambda key: key)
        self._cache: dict[str, LayerScore] = {}
        self._lock = threading.Lock()
        self.compute_count = 0

    def ensure_keys(self, keys: Sequence[str]) -> None:
        weight_keys = [self._key_map(k) for k in keys]
        missing = sorted(
            {k for k in weight_keys if not self._aligned.contains(k)}
            | {k for k in weight_keys if not self._unaligned.contains(k)}
        )
        if missing:
            raise MissingKeyError(f"weight keys missing from sources: {missing}", tuple(missing))

    def operator(self, key: str) -> SubspaceOperator:
        weight_key = self._key_map(key)
        w_aligned = self._aligned.load(weight_key)
        w_unaligned = self._unaligned.load(weight_key)
        return alignment_matrix(w_aligned, w_unaligned, key=key)

    def score(self, layer: LoraLayer) -> LayerScore:
        with self._lock:
            cached = self._cache.get(layer.key)
        if cached is not None:
            return cached
        score, _ = self.score_with_operator(layer)
        return score

    def score_with_operator(self, layer: LoraLayer) -> tuple[LayerScore, SubspaceOperator]:
        op = self.operator(layer.key)
        score = cosine_score(op, layer.factors(), key=layer.key)
        with self._lock:
            self._cache[layer.key] = score
            self.compute_count += 1
        return score, op

    def digests(self) -> dict[str, str]:
        return {"aligned": self._aligned.digest(), "unaligned": self._unaligned.digest()}


def _map_layers(keys, fn, workers: int):
    if workers < 1:
        raise PolicyError(f"worker count must be >= 1, got {workers}")
    if workers == 1:
        return [fn(k) for k in keys]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, keys))


def _apply_strategy(policy: MergePolicy, fine: LoraLayer, safe: LoraLayer) -> tuple[LoraLayer, float]:
    if policy.strategy == LINEAR:
        return merge_linear(
            fine, safe, policy.w_f, policy.w_s, policy.rank_mode, policy.target_rank
        )
    if policy.strategy == DARE_LINEAR:
        return merge_dare_linear(
            fine,
            safe,
            policy.w_f,
            policy.w_s,
            policy.density,
            policy.seed,
            policy.rank_mode,
            policy.target_rank,
        )
    if policy.strategy == TIES:
        return merge_ties(
            fine,
            safe,
            policy.w_f,
            policy.w_s,
            policy.density,
            policy.rank_mode,
            policy.target_rank,
        )
    raise PolicyError(f"unknown strategy {policy.strategy!r}")


def run_safemerge(
    fine_tuned: AdapterBundle,
    safe: AdapterBundle,
    aligned,
    unaligned,
    policy: MergePolicy,
    workers: int = 1,
    scorer: LayerScorer | None = None,
    key_map=None,
) -> tuple[AdapterBundle, MergeReport]:
    """Score every fine-tuned layer; merge those scoring below tau with the
    corresponding safe layer; copy the rest untouched."""
    scorer = scorer or LayerScorer(aligned, unaligned, key_map)
    keys = fine_tuned.keys()
    scorer.ensure_keys(keys)

    def handle(key: str) -> tuple[LayerDecision, LoraLayer]:
        layer = fine_tuned.layers[key]
        score = scorer.score(layer)
        decision = LayerDecision(
            key=key,
            rho=score.rho,
            merged=False,
            rank_out=layer.rank,
            degenerate_reason=score.degenerate_reason,
        )
        if not score.rho < policy.tau:
            return decision, layer
        safe_layer = safe.layers.get(key)
        if safe_layer is None:
            decision.note = "missing-safe-layer: copied unmerged"
            return decision, layer
        merged_layer, err = _apply_strategy(policy, layer, safe_layer)
        decision.merged = True
        decision.strategy = policy.strategy
        decision.w_f = policy.w_f
        decision.w_s = policy.w_s
        decision.rank_out = merged_layer.rank
        decision.reconstruction_error = err
        if safe_layer.rank != layer.rank:
            decision.note = f"rank-mismatch: fine_tuned={layer.rank} safe={safe_layer.rank}"
        return decision, merged_layer

    results = _map_layers(keys, handle, workers)
    out_layers = {key: layer for key, (_, layer) in zip(keys, results)}
    bundle = AdapterBundle(out_layers, fine_tuned.target_modules, source_path="safemerge")
    digests = {
        "fine_tuned": fine_tuned.digest(),
        "safe": safe.digest(),
        **scorer.digests(),
    }
    report = MergeReport(
        mode="merge",
        decisions=[d for d, _ in results],
        policy=policy.to_json_dict(),
        input_digests=digests,
        heterogeneous_rank=bundle.heterogeneous_rank,
    )
    return bundle, report


def run_safelora(
    fine_tuned: AdapterBundle,
    aligned,
    unaligned,
    tau: float,
    workers: int = 1,
    scorer: LayerScorer | None = None,
    key_map=None,
) -> tuple[AdapterBundle, MergeReport]:
    """Like run_safemerge but flagged layers are replaced by their subspace
    projection; no safe adapter is involved."""
    if not 0.0 <= tau <= 1.0:
        raise PolicyError(f"tau must lie in [0, 1], got {tau}")
    scorer = scorer or LayerScorer(aligned, unaligned, key_map)
    keys = fine_tuned.keys()
    scorer.ensure_keys(keys)

    def handle(key: str) -> tuple[LayerDecision, LoraLayer]:
        layer = fine_tuned.layers[key]
        score, op = scorer.score_with_operator(layer)
        decision = LayerDecision(
            key=key,
            rho=score.rho,
            merged=False,
            rank_out=layer.rank,
            degenerate_reason=score.degenerate_reason,
        )
        if not score.rho < tau:
            return decision, layer
        if score.degenerate_reason == ZERO_SUBSPACE:
            decision.note = "zero-subspace: projection undefined, copied unmerged"
            return decision, layer
        projected = safelora_project(layer, op)
        decision.merged = True
        decision.strategy = "safelora_project"
        return decision, projected

    results = _map_layers(keys, handle, workers)
    out_layers = {key: layer for key, (_, layer) in zip(keys, results)}
    bundle = AdapterBundle(out_layers, fine_tuned.target_modules, source_path="safelora")
    report = MergeReport(
        mode="project",
        decisions=[d for d, _ in results],
        policy={"tau": tau},
        input_digests={"fine_tuned": fine_tuned.digest(), **scorer.digests()},
        heterogeneous_rank=bundle.heterogeneous_rank,
    )
    return bundle, report


def run_resta(
    sft: AdapterBundle,
    harmful: AdapterBundle,
    alpha_resta: float,
    dare: tuple[float, int] | None = None,
    rank_mode: str = CONCAT,
    target_rank: int | None = None,
    negate: str = "b",
    workers: int = 1,
) -> tuple[AdapterBundle, MergeReport]:
    """Merge a negated harmful adapter into every layer of a fine-tuned one.

    Global by design: every shared key is merged, and the key sets must match
    exactly.
    """
    if alpha_resta <= 0.0:
        raise PolicyError(
            f"alpha must be positive, got {alpha_resta} (zero would be the identity)"
        )
    sft_keys, harm_keys = set(sft.keys()), set(harmful.keys())
    if sft_keys != harm_keys:
        only_sft = sorted(sft_keys - harm_keys)
        only_harm = sorted(harm_keys - sft_keys)
        raise MissingKeyError(
            f"adapter key sets differ: only in fine-tuned {only_sft}, "
            f"only in harmful {only_harm}",
            tuple(only_sft + only_harm),
        )

    def handle(key: str) -> tuple[LayerDecision, LoraLayer]:
        layer = sft.layers[key]
        merged_layer, err = resta_merge(
            layer, harmful.layers[key], alpha_resta, dare, rank_mode, target_rank, negate
        )
        return (
            LayerDecision(
                key=key,
                rho=None,
                merged=True,
                strategy="resta",
                w_f=1.0,
                w_s=alpha_resta,
                rank_out=merged_layer.rank,
                reconstruction_error=err,
                delta_norm_before=frobenius_norm(layer.delta()),
                delta_norm_after=frobenius_norm(merged_layer.delta()),
            ),
            merged_layer,
        )

    keys = sft.keys()
    results = _map_layers(keys, handle, workers)
    out_layers = {key: layer for key, (_, layer) in zip(keys, results)}
    bundle = AdapterBundle(out_layers, sft.target_modules, source_path="resta")
    policy = {
        "alpha": alpha_resta,
        "dare_density": dare[0] if dare else None,
        "dare_seed": dare[1] if dare else None,
        "rank_mode": rank_mode,
        "target_rank": target_rank,
        "negate": negate,
    }
    report = MergeReport(
        mode="resta",
        decisions=[d for d, _ in results],
        policy=policy,
        input_digests={"fine_tuned": sft.digest(), "harmful": harmful.digest()},
        heterogeneous_rank=bundle.heterogeneous_rank,
    )
    return bundle, report


def run_analyze(
    fine_tuned: AdapterBundle,
    aligned,
    unaligned,
    workers: int = 1,
    scorer: LayerScorer | None = None,
    key_map=None,
) -> MergeReport:
    """Score every layer without producing an output adapter."""
    scorer = scorer or LayerScorer(aligned, unaligned, key_map)
    keys = fine_tuned.keys()
    scorer.ensure_keys(keys)

    def handle(key: str) -> LayerDecision:
        score = scorer.score(fine_tuned.layers[key])
        return LayerDecision(
            key=key,
            rho=score.rho,
            merged=False,
            rank_out=fine_tuned.layers[key].rank,
            degenerate_reason=score.degenerate_reason,
        )

    decisions = _map_layers(keys, handle, workers)
    return MergeReport(
        mode="analyze",
        decisions=decisions,
        policy=None,
        input_digests={"fine_tuned": fine_tuned.digest(), **scorer.digests()},
    )


@dataclass(frozen=True)
class SweepGrid:
    """Cartesian policy grid for sweeps."""

    taus: tuple[float, ...]
    weights: tuple[tuple[float, float], ...] = ((0.8, 0.2),)
    strategies: tuple[str, ...] = (LINEAR,)
    densities: tuple[float, ...] = (1.0,)
    seed: int = 0
    rank_mode: str = "auto"  # concat for linear, restore otherwise
    target_rank: int | None = None

    def __post_init__(self):
        if not (self.taus and self.weights and self.strategies and self.densities):
            raise PolicyError("sweep grid must be non-empty in every dimension")

    def policies(self):
        for strategy, tau, (w_f, w_s), density in product(
            self.strategies, self.taus, self.weights, self.densities
        ):
            rank_mode = self.rank_mode
            if rank_mode == "auto":
                rank_mode = CONCAT if strategy == LINEAR else RESTORE
            yield MergePolicy(
                strategy=strategy,
                w_f=w_f,
                w_s=w_s,
                density=density,
                seed=self.seed,
                tau=tau,
                rank_mode=rank_mode,
                target_rank=self.target_rank,
            )


def sweep(
    fine_tuned: AdapterBundle,
    safe: AdapterBundle,
    aligned,
    unaligned,
    grid: SweepGrid,
    workers: int = 1,
    key_map=None,
) -> tuple[list[dict], LayerScorer]:
    """One summary row per grid point; layer scores are computed once and
    shared across the whole grid."""
    scorer = LayerScorer(aligned, unaligned, key_map)
    rows = []
    for policy in grid.policies():
        _, report = run_safemerge(
            fine_tuned, safe, aligned, unaligned, policy, workers=workers, scorer=scorer
        )
        errs = [d.reconstruction_error for d in report.decisions if d.merged]
        rhos = [d.rho for d in report.decisions if d.rho is not None]
        rows.append(
            {
                "strategy": policy.strategy,
                "tau": policy.tau,
                "w_f": policy.w_f,
                "w_s": policy.w_s,
                "density": policy.density,
                "rank_mode": policy.rank_mode,
                "target_rank": policy.target_rank,
                "merged_count": report.merged_count,
                "total_count": report.total_count,
                "mean_rho": sum(rhos) / len(rhos) if rhos else None,
                "min_rho": min(rhos) if rhos else None,
                "max_rho": max(rhos) if rhos else None,
                "mean_reconstruction_error": sum(errs) / len(errs) if errs else 0.0,
                "max_reconstruction_error": max(errs) if errs else 0.0,
            }
        )
    return rows, scorer


def write_sweep_csv(rows: list[dict], path: str | Path) -> Path:
    if not rows:
        raise PolicyError("no sweep rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path
