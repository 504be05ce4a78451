"""Synthetic desk-scale fixtures with planted ground truth.

Generates an aligned/unaligned weight pair plus fine-tuned, safe, and harmful
adapters, all seeded and byte-reproducible. Each targeted layer gets one
planting mode that pins its expected score regime:

  - ``random``      full-support random update; score strictly inside (0, 1)
  - ``orthogonal``  alignment difference lives in the top rows, the update in
                    the bottom rows, so the two are exactly orthogonal (score 0)
  - ``inside``      update columns drawn from the alignment difference's
                    column space (score high, above random on same geometry)
  - ``zero``        zero update (score 1 by convention)

The orthogonal construction survives float round-trips exactly: aligned
weights equal unaligned plus a difference supported on disjoint rows, so the
recovered difference keeps its zero rows bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adapter_io import AdapterBundle, LoraLayer, write_adapter, write_safetensors
from .errors import PolicyError
from .rng import keyed_generator
from .tensor_core import Matrix

__all__ = [
    "PLANT_RANDOM",
    "PLANT_ORTHOGONAL",
    "PLANT_INSIDE",
    "PLANT_ZERO",
    "FixtureSpec",
    "layer_keys",
    "generate_fixture",
    "MANIFEST_NAME",
]

PLANT_RANDOM = "random"
PLANT_ORTHOGONAL = "orthogonal"
PLANT_INSIDE = "inside"
PLANT_ZERO = "zero"

MANIFEST_NAME = "manifest.json"

_WEIGHTS_SINGLE = "model.safetensors"
_INDEX_NAME = "model.safetensors.index.json"


@dataclass(frozen=True)
class FixtureSpec:
    num_layers: int = 4
    d_out: int = 32
    d_in: int = 32
    rank: int = 4
    lora_alpha: float = 8.0
    target_modules: tuple[str, ...] = ("q_proj", "v_proj")
    seed: int = 0
    orthogonal: int = 0
    inside: int = 0
    zero: int = 0
    shards: int = 1

    def __post_init__(self):
        object.__setattr__(self, "target_modules", tuple(self.target_modules))
        if self.num_layers < 1 or self.d_out < 2 or self.d_in < 1:
            raise PolicyError("fixture needs num_layers >= 1, d_out >= 2, d_in >= 1")
        if not 1 <= self.rank <= min(self.d_out, self.d_in):
            raise PolicyError(f"rank {self.rank} out of range for {self.d_out}x{self.d_in}")
        if self.shards < 1:
            raise PolicyError("shards must be >= 1")
        population = self.num_layers * len(self.target_modules)
        planted = self.orthogonal + self.inside + self.zero
        if min(self.orthogonal, self.inside, self.zero) < 0 or planted > population:
            raise PolicyError(
                f"planted counts ({planted}) exceed layer population ({population})"
            )


def layer_keys(spec: FixtureSpec) -> list[str]:
    return [
        f"model.layers.{i}.self_attn.{module}"
        for i in range(spec.num_layers)
        for module in spec.target_modules
    ]


def planting_plan(spec: FixtureSpec) -> dict[str, str]:
    """Planting mode per key, assigned in key order: orthogonal, inside, zero,
    then random for the remainder."""
    keys = layer_keys(spec)
    modes = (
        [PLANT_ORTHOGONAL] * spec.orthogonal
        + [PLANT_INSIDE] * spec.inside
        + [PLANT_ZERO] * spec.zero
    )
    modes += [PLANT_RANDOM] * (len(keys) - len(modes))
    return dict(zip(keys, modes))


def _normal(spec: FixtureSpec, key: str, role: str, shape: tuple[int, ...], scale: float):
    gen = keyed_generator(spec.seed, key, role)
    return (gen.standard_normal(shape) * scale).astype(np.float32)


def _weight_pair(spec: FixtureSpec, key: str, mode: str) -> tuple[Matrix, Matrix, np.ndarray]:
    """(aligned, unaligned, effective difference) for one layer."""
    w_un = _normal(spec, key, "unaligned", (spec.d_out, spec.d_in), 0.1)
    v = _normal(spec, key, "alignment", (spec.d_out, spec.d_in), 0.05)
    if mode == PLANT_ORTHOGONAL:
        v[spec.d_out // 2 :, :] = 0.0
    w_al = w_un + v
    return Matrix(w_al), Matrix(w_un), w_al - w_un


def _fine_tuned_layer(spec: FixtureSpec, key: str, mode: str, v_eff: np.ndarray) -> LoraLayer:
    a = _normal(spec, key, "ft_a", (spec.rank, spec.d_in), 0.1)
    if mode == PLANT_ZERO:
        b = np.zeros((spec.d_out, spec.rank), dtype=np.float32)
    elif mode == PLANT_ORTHOGONAL:
        b = _normal(spec, key, "ft_b", (spec.d_out, spec.rank), 0.1)
        b[: spec.d_out // 2, :] = 0.0  # disjoint rows from the alignment difference
    elif mode == PLANT_INSIDE:
        g = _normal(spec, key, "ft_mix", (spec.d_in, spec.rank), 0.3)
        b = (v_eff.astype(np.float64) @ g.astype(np.float64)).astype(np.float32)
    else:
        b = _normal(spec, key, "ft_b", (spec.d_out, spec.rank), 0.1)
    return LoraLayer(key, Matrix(a), Matrix(b), spec.rank, spec.lora_alpha)


def _random_layer(spec: FixtureSpec, key: str, role: str) -> LoraLayer:
    a = _normal(spec, key, f"{role}_a", (spec.rank, spec.d_in), 0.1)
    b = _normal(spec, key, f"{role}_b", (spec.d_out, spec.rank), 0.1)
    return LoraLayer(key, Matrix(a), Matrix(b), spec.rank, spec.lora_alpha)


def _write_weights(tensors: dict[str, Matrix], out_dir: Path, shards: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if shards == 1:
        write_safetensors(tensors, out_dir / _WEIGHTS_SINGLE)
        return
    names = sorted(tensors)
    shard_files = [f"model-{i + 1:05d}-of-{shards:05d}.safetensors" for i in range(shards)]
    weight_map: dict[str, str] = {}
    per_shard: list[dict[str, Matrix]] = [{} for _ in range(shards)]
    for idx, name in enumerate(names):
        shard_idx = idx % shards
        per_shard[shard_idx][name] = tensors[name]
        weight_map[name] = shard_files[shard_idx]
    for shard_tensors, fname in zip(per_shard, shard_files):
        if shard_tensors:
            write_safetensors(shard_tensors, out_dir / fname)
    index = {
        "metadata": {"total_size": sum(m.rows * m.cols * 4 for m in tensors.values())},
        "weight_map": weight_map,
    }
    (out_dir / _INDEX_NAME).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def generate_fixture(spec: FixtureSpec, out_dir: str | Path) -> dict:
    """Write the full fixture tree and return its manifest."""
    out = Path(out_dir)
    plan = planting_plan(spec)

    aligned: dict[str, Matrix] = {}
    unaligned: dict[str, Matrix] = {}
    ft_layers: dict[str, LoraLayer] = {}
    safe_layers: dict[str, LoraLayer] = {}
    harm_layers: dict[str, LoraLayer] = {}
    for key, mode in plan.items():
        w_al, w_un, v_eff = _weight_pair(spec, key, mode)
        aligned[f"{key}.weight"] = w_al
        unaligned[f"{key}.weight"] = w_un
        ft_layers[key] = _fine_tuned_layer(spec, key, mode, v_eff)
        safe_layers[key] = _random_layer(spec, key, "safe")
        harm_layers[key] = _random_layer(spec, key, "harm")

    _write_weights(aligned, out / "aligned", spec.shards)
    _write_weights(unaligned, out / "unaligned", spec.shards)
    write_adapter(AdapterBundle(ft_layers, spec.target_modules), out / "fine_tuned")
    write_adapter(AdapterBundle(safe_layers, spec.target_modules), out / "safe")
    write_adapter(AdapterBundle(harm_layers, spec.target_modules), out / "harmful")

    manifest = {
        "spec": {**asdict(spec), "target_modules": list(spec.target_modules)},
        "layers": {
            key: {
                "planting": mode,
                "expected_regime": {
                    PLANT_RANDOM: "rho in (0, 1)",
                    PLANT_ORTHOGONAL: "rho == 0 (orthogonal-delta)",
                    PLANT_INSIDE: "rho high, above random on same geometry",
                    PLANT_ZERO: "rho == 1 (zero-delta)",
                }[mode],
            }
            for key, mode in plan.items()
        },
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
