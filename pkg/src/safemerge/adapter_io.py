"""Reading and writing adapters and full-weight checkpoints in the safetensors
container, including sharded checkpoints.

Container layout: an 8-byte little-endian header length, a UTF-8 JSON header
mapping tensor name -> {dtype, shape, data_offsets}, then the raw
little-endian payload. Offsets are relative to the end of the header.
Writing is deterministic: sorted names, canonical compact JSON padded with
spaces to an 8-byte boundary, contiguous payload in name order. Readers parse
the header eagerly and decode tensor payloads on demand, so loading k layers
from an n-layer checkpoint touches only those k payloads.

An adapter on disk is a directory holding ``adapter_model.safetensors`` plus
``adapter_metadata.json`` (rank, lora_alpha, target_modules, per-layer
overrides, heterogeneous-rank flag).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    MissingKeyError,
    NumericError,
    PairingError,
    PolicyError,
)
from .tensor_core import LowRankFactors, Matrix, densify

__all__ = [
    "NamingProfile",
    "DEFAULT_PROFILE",
    "LoraLayer",
    "AdapterBundle",
    "SafetensorsReader",
    "read_safetensors",
    "write_safetensors",
    "load_adapter",
    "write_adapter",
    "CheckpointSource",
    "InMemorySource",
    "load_weight_pair",
    "expected_layer_population",
    "file_digest",
    "ADAPTER_WEIGHTS_NAME",
    "ADAPTER_METADATA_NAME",
]

ADAPTER_WEIGHTS_NAME = "adapter_model.safetensors"
ADAPTER_METADATA_NAME = "adapter_metadata.json"

_HEADER_LEN_BYTES = 8
_SUPPORTED_DTYPES = {"F32": 4, "F16": 2, "BF16": 2}


@dataclass(frozen=True)
class NamingProfile:
    """How tensor names map to canonical layer keys.

    ``strip_prefix`` is removed from adapter tensor names, and the LoRA
    suffixes identify the A/B roles. ``weight_suffix`` is stripped from
    full-weight tensor names. ``key_map`` optionally redirects a canonical
    adapter key to a differently named full-weight key.
    """

    strip_prefix: str = "base_model.model."
    lora_a_suffix: str = ".lora_A.weight"
    lora_b_suffix: str = ".lora_B.weight"
    weight_suffix: str = ".weight"
    key_map: Mapping[str, str] | None = None

    def weight_key(self, adapter_key: str) -> str:
        if self.key_map:
            return self.key_map.get(adapter_key, adapter_key)
        return adapter_key


DEFAULT_PROFILE = NamingProfile()


@dataclass(frozen=True, eq=False)
class LoraLayer:
    """Low-rank update for one layer: delta = (lora_alpha / rank) * b @ a."""

    key: str
    a: Matrix  # (rank, d_in)
    b: Matrix  # (d_out, rank)
    rank: int
    lora_alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise DimensionError(f"{self.key}: rank must be >= 1")
        if self.a.rows != self.rank or self.b.cols != self.rank:
            raise DimensionError(
                f"{self.key}: rank {self.rank} does not match factors "
                f"a={self.a.shape}, b={self.b.shape}"
            )
        if not (math.isfinite(self.lora_alpha) and self.lora_alpha > 0):
            raise PolicyError(f"{self.key}: lora_alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.b.rows, self.a.cols)

    def factors(self) -> LowRankFactors:
        return LowRankFactors(self.b, self.a, self.scaling)

    def delta(self) -> Matrix:
        return densify(self.factors())

    @property
    def module_suffix(self) -> str:
        return self.key.rsplit(".", 1)[-1]


@dataclass
class AdapterBundle:
    """Ordered collection of LoRA layers plus adapter-level metadata."""

    layers: dict[str, LoraLayer]
    target_modules: tuple[str, ...]
    source_path: str = ""

    def __post_init__(self):
        self.target_modules = tuple(self.target_modules)
        for key, layer in self.layers.items():
            if key != layer.key:
                raise PairingError(f"bundle key {key!r} disagrees with layer key {layer.key!r}")
            if self.target_modules and not any(
                key.endswith(f".{m}") or key == m for m in self.target_modules
            ):
                raise PairingError(
                    f"layer key {key!r} does not end in any of target_modules "
                    f"{list(self.target_modules)}"
                )

    @property
    def heterogeneous_rank(self) -> bool:
        ranks = {layer.rank for layer in self.layers.values()}
        return len(ranks) > 1

    @property
    def declared_rank(self) -> int | None:
        ranks = {layer.rank for layer in self.layers.values()}
        return ranks.pop() if len(ranks) == 1 else None

    @property
    def declared_alpha(self) -> float | None:
        alphas = {layer.lora_alpha for layer in self.layers.values()}
        return alphas.pop() if len(alphas) == 1 else None

    def keys(self) -> list[str]:
        return list(self.layers)

    def digest(self) -> str:
        """Content hash over keys, ranks, alphas, and factor payloads."""
        h = hashlib.sha256()
        for key in sorted(self.layers):
            layer = self.layers[key]
            h.update(key.encode())
            h.update(struct.pack("<qd", layer.rank, layer.lora_alpha))
            h.update(np.ascontiguousarray(layer.a.data, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(layer.b.data, dtype="<f4").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# safetensors container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dtype: str
    shape: tuple[int, ...]
    start: int  # relative to payload start
    end: int


def _decode_payload(buf: bytes, dtype: str, shape: tuple[int, ...], name: str) -> np.ndarray:
    if dtype == "F32":
        arr = np.frombuffer(buf, dtype="<f4").astype(np.float32)
    elif dtype == "F16":
        arr = np.frombuffer(buf, dtype="<f2").astype(np.float32)
    elif dtype == "BF16":
        u16 = np.frombuffer(buf, dtype="<u2").astype(np.uint32)
        arr = (u16 << 16).view(np.float32)
    else:  # pragma: no cover - guarded at header parse
        raise FormatError(f"unsupported dtype {dtype!r} for tensor {name!r}")
    return arr.reshape(shape)


class SafetensorsReader(Mapping):
    """Lazy mapping of tensor name -> Matrix backed by one safetensors file.

    The header is parsed eagerly; payload bytes are read per tensor with a
    fresh file handle, so concurrent reads are safe. ``bytes_read`` counts
    payload bytes actually touched.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.bytes_read = 0
        try:
            with open(self.path, "rb") as f:
                raw_len = f.read(_HEADER_LEN_BYTES)
                if len(raw_len) != _HEADER_LEN_BYTES:
                    raise FormatError(f"{self.path}: truncated header length")
                header_len = struct.unpack("<Q", raw_len)[0]
                file_size = self.path.stat().st_size
                if _HEADER_LEN_BYTES + header_len > file_size:
                    raise FormatError(f"{self.path}: header length exceeds file size")
                header_bytes = f.read(header_len)
        except OSError as exc:
            raise FormatError(f"cannot read {self.path}: {exc}") from exc
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: malformed header JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise FormatError(f"{self.path}: header is not a JSON object")

        self.metadata: dict[str, str] = header.pop("__metadata__", {}) or {}
        self._payload_start = _HEADER_LEN_BYTES + header_len
        payload_size = file_size - self._payload_start
        self._infos: dict[str, TensorInfo] = {}
        for name, entry in header.items():
            try:
                dtype = entry["dtype"]
                shape = tuple(int(d) for d in entry["shape"])
                start, end = (int(v) for v in entry["data_offsets"])
            except (TypeError, KeyError, ValueError) as exc:
                raise FormatError(f"{self.path}: malformed entry for tensor {name!r}") from exc
            if dtype not in _SUPPORTED_DTYPES:
                raise FormatError(f"{self.path}: unsupported dtype {dtype!r} for tensor {name!r}")
            nbytes = _SUPPORTED_DTYPES[dtype] * math.prod(shape) if shape else _SUPPORTED_DTYPES[dtype]
            if not 0 <= start <= end or end - start != nbytes:
                raise FormatError(
                    f"{self.path}: data_offsets {[start, end]} disagree with "
                    f"shape {list(shape)} for tensor {name!r}"
                )
            if end > payload_size:
                raise FormatError(f"{self.path}: truncated payload for tensor {name!r}")
            self._infos[name] = TensorInfo(name, dtype, shape, start, end)

    def info(self, name: str) -> TensorInfo:
        if name not in self._infos:
            raise MissingKeyError(f"{self.path}: no tensor named {name!r}", (name,))
        return self._infos[name]

    def read(self, name: str) -> Matrix:
        info = self.info(name)
        if len(info.shape) != 2:
            raise FormatError(
                f"{self.path}: tensor {name!r} has shape {list(info.shape)}, expected 2-D"
            )
        with open(self.path, "rb") as f:
            f.seek(self._payload_start + info.start)
            buf = f.read(info.end - info.start)
        if len(buf) != info.end - info.start:
            raise FormatError(f"{self.path}: truncated payload for tensor {name!r}")
        self.bytes_read += len(buf)
        try:
            return Matrix(_decode_payload(buf, info.dtype, info.shape, name))
        except NumericError as exc:
            raise NumericError(f"{self.path}: tensor {name!r}: {exc}") from exc

    # Mapping protocol: lazy dict-like access.
    def __getitem__(self, name: str) -> Matrix:
        return self.read(name)

    def __iter__(self) -> Iterator[str]:
        return iter(self._infos)

    def __len__(self) -> int:
        return len(self._infos)


def read_safetensors(path: str | Path) -> SafetensorsReader:
    """Open a safetensors file as a lazy name -> Matrix mapping."""
    return SafetensorsReader(path)


def write_safetensors(
    tensors: Mapping[str, Matrix],
    path: str | Path,
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Write a deterministic safetensors file (sorted names, canonical header)."""
    if not tensors:
        raise PolicyError("refusing to write an empty safetensors file")
    names = sorted(tensors)
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    offset = 0
    payloads: list[bytes] = []
    for name in names:
        m = tensors[name]
        payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": [m.rows, m.cols],
            "data_offsets": [offset, offset + len(payload)],
        }
        payloads.append(payload)
        offset += len(payload)

    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    pad = (-(_HEADER_LEN_BYTES + len(blob))) % 8
    blob += b" " * pad
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for payload in payloads:
                f.write(payload)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------


def _adapter_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.is_dir():
        return p / ADAPTER_WEIGHTS_NAME, p / ADAPTER_METADATA_NAME
    return p, p.parent / ADAPTER_METADATA_NAME


def load_adapter(
    path: str | Path,
    profile: NamingProfile = DEFAULT_PROFILE,
    rank: int | None = None,
    lora_alpha: float | None = None,
) -> AdapterBundle:
    """Load a LoRA adapter, uniting A/B tensor pairs under canonical keys.

    ``rank`` and ``lora_alpha`` act as fallbacks when the metadata file is
    absent or does not cover a layer.
    """
    weights_path, meta_path = _adapter_paths(path)
    if not weights_path.exists():
        raise FormatError(f"adapter weights not found at {weights_path}")
    reader = read_safetensors(weights_path)

    meta: dict = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: malformed metadata JSON: {exc}") from exc
    layer_meta: dict[str, dict] = meta.get("layers", {})
    default_rank = meta.get("rank", rank)
    default_alpha = meta.get("lora_alpha", lora_alpha)

    pairs: dict[str, dict[str, str]] = {}
    for name in reader:
        if name.endswith(profile.lora_a_suffix):
            stem, role = name[: -len(profile.lora_a_suffix)], "a"
        elif name.endswith(profile.lora_b_suffix):
            stem, role = name[: -len(profile.lora_b_suffix)], "b"
        else:
            raise PairingError(
                f"{weights_path}: tensor {name!r} matches neither LoRA suffix "
                f"({profile.lora_a_suffix!r} / {profile.lora_b_suffix!r})"
            )
        if stem.startswith(profile.strip_prefix):
            stem = stem[len(profile.strip_prefix) :]
        pairs.setdefault(stem, {})[role] = name

    orphans = sorted(k for k, roles in pairs.items() if len(roles) != 2)
    if orphans:
        raise PairingError(f"{weights_path}: unpaired LoRA tensors for keys {orphans}")

    layers: dict[str, LoraLayer] = {}
    for key in pairs:  # header order: deterministic for our own files
        a = reader[pairs[key]["a"]]
        b = reader[pairs[key]["b"]]
        if a.rows != b.cols:
            raise DimensionError(
                f"{key}: rank mismatch between A ({a.shape}) and B ({b.shape})"
            )
        this_meta = layer_meta.get(key, {})
        layer_rank = this_meta.get("rank", default_rank)
        if layer_rank is None:
            layer_rank = a.rows
        elif layer_rank != a.rows:
            raise DimensionError(
                f"{key}: declared rank {layer_rank} disagrees with tensor rank {a.rows}"
            )
        layer_alpha = this_meta.get("lora_alpha", default_alpha)
        if layer_alpha is None:
            raise PolicyError(
                f"{key}: lora_alpha not supplied (no metadata file and no override)"
            )
        layers[key] = LoraLayer(key, a, b, int(layer_rank), float(layer_alpha))

    target_modules = meta.get("target_modules")
    if not target_modules:
        target_modules = sorted({k.rsplit(".", 1)[-1] for k in layers})
    return AdapterBundle(layers, tuple(target_modules), source_path=str(path))


def write_adapter(
    bundle: AdapterBundle,
    path: str | Path,
    profile: NamingProfile = DEFAULT_PROFILE,
) -> Path:
    """Write an adapter directory (weights + metadata). Deterministic bytes."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, Matrix] = {}
    for key, layer in bundle.layers.items():
        tensors[profile.strip_prefix + key + profile.lora_a_suffix] = layer.a
        tensors[profile.strip_prefix + key + profile.lora_b_suffix] = layer.b
    write_safetensors(tensors, out_dir / ADAPTER_WEIGHTS_NAME)

    meta = {
        "format_version": 1,
        "rank": bundle.declared_rank,
        "lora_alpha": bundle.declared_alpha,
        "target_modules": list(bundle.target_modules),
        "heterogeneous_rank": bundle.heterogeneous_rank,
        "layers": {
            key: {"rank": layer.rank, "lora_alpha": layer.lora_alpha}
            for key, layer in sorted(bundle.layers.items())
        },
    }
    (out_dir / ADAPTER_METADATA_NAME).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return out_dir


# ---------------------------------------------------------------------------
# full-weight sources
# ---------------------------------------------------------------------------


class CheckpointSource:
    """Full-model weights addressed by canonical key, lazily loaded.

    Resolves either a single safetensors file or a sharded checkpoint via an
    index JSON of the form {"weight_map": {tensor_name: shard_filename}}.
    """

    def __init__(
        self,
        tensor_map: dict[str, tuple[Path, str]],
        label: str,
        profile: NamingProfile = DEFAULT_PROFILE,
    ):
        # canonical key -> (shard path, tensor name)
        self._tensor_map = tensor_map
        self._readers: dict[Path, SafetensorsReader] = {}
        self._digest: str | None = None
        self.label = label
        self.profile = profile

    @classmethod
    def open(cls, path: str | Path, profile: NamingProfile = DEFAULT_PROFILE) -> CheckpointSource:
        p = Path(path)
        if p.is_file() and p.name.endswith(".index.json"):
            return cls._from_index(p, profile)
        if p.is_file():
            return cls._from_files([p], str(p), profile)
        if p.is_dir():
            indexes = sorted(p.glob("*.safetensors.index.json"))
            if indexes:
                return cls._from_index(indexes[0], profile)
            files = sorted(p.glob("*.safetensors"))
            if not files:
                raise FormatError(f"no safetensors content under {p}")
            return cls._from_files(files, str(p), profile)
        raise FormatError(f"checkpoint path does not exist: {p}")

    @classmethod
    def _from_index(cls, index_path: Path, profile: NamingProfile) -> CheckpointSource:
        try:
            index = json.loads(index_path.read_text())
            weight_map = index["weight_map"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{index_path}: malformed checkpoint index: {exc}") from exc
        tensor_map: dict[str, tuple[Path, str]] = {}
        for tensor_name, shard_name in weight_map.items():
            shard = index_path.parent / shard_name
            if not shard.exists():
                raise FormatError(f"{index_path}: shard {shard_name!r} not found")
            key = cls._canonical(tensor_name, profile)
            if key in tensor_map:
                raise FormatError(f"{index_path}: duplicate canonical key {key!r}")
            tensor_map[key] = (shard, tensor_name)
        return cls(tensor_map, str(index_path), profile)

    @classmethod
    def _from_files(cls, files: list[Path], label: str, profile: NamingProfile) -> CheckpointSource:
        tensor_map: dict[str, tuple[Path, str]] = {}
        for file in files:
            for tensor_name in read_safetensors(file):
                key = cls._canonical(tensor_name, profile)
                if key in tensor_map:
                    raise FormatError(f"{label}: duplicate canonical key {key!r}")
                tensor_map[key] = (file, tensor_name)
        return cls(tensor_map, label, profile)

    @staticmethod
    def _canonical(tensor_name: str, profile: NamingProfile) -> str:
        if tensor_name.endswith(profile.weight_suffix):
            return tensor_name[: -len(profile.weight_suffix)]
        return tensor_name

    def _reader(self, path: Path) -> SafetensorsReader:
        if path not in self._readers:
            self._readers[path] = read_safetensors(path)
        return self._readers[path]

    def keys(self) -> list[str]:
        return sorted(self._tensor_map)

    def contains(self, key: str) -> bool:
        return key in self._tensor_map

    def load(self, key: str) -> Matrix:
        if key not in self._tensor_map:
            raise MissingKeyError(f"{self.label}: no weights for key {key!r}", (key,))
        path, tensor_name = self._tensor_map[key]
        return self._reader(path).read(tensor_name)

    @property
    def bytes_read(self) -> int:
        return sum(r.bytes_read for r in self._readers.values())

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            for path in sorted({p for p, _ in self._tensor_map.values()}):
                h.update(file_digest(path).encode())
            self._digest = h.hexdigest()
        return self._digest


class InMemorySource:
    """Weight source backed by a mapping or a deterministic key -> Matrix factory.

    Used for synthetic models that never touch disk; ``digest`` returns the
    provenance label rather than a content hash.
    """

    def __init__(self, loader, keys: list[str], label: str = "in-memory"):
        self._loader = loader
        self._keys = list(keys)
        self.label = label

    @classmethod
    def from_dict(cls, tensors: Mapping[str, Matrix], label: str = "in-memory") -> InMemorySource:
        return cls(tensors.__getitem__, list(tensors), label)

    def keys(self) -> list[str]:
        return list(self._keys)

    def contains(self, key: str) -> bool:
        return key in self._keys

    def load(self, key: str) -> Matrix:
        if key not in self._keys:
            raise MissingKeyError(f"{self.label}: no weights for key {key!r}", (key,))
        return self._loader(key)

    def digest(self) -> str:
        return self.label


def load_weight_pair(aligned, unaligned, keys: list[str]) -> Iterator[tuple[str, Matrix, Matrix]]:
    """Yield (key, aligned, unaligned) matrices one key at a time.

    Validates the full key set against both sources up front (header-level,
    no payload reads), then loads lazily so peak memory stays at a few layer
    matrices.
    """
    missing = [k for k in keys if not aligned.contains(k)] + [
        k for k in keys if not unaligned.contains(k)
    ]
    if missing:
        raise MissingKeyError(
            f"weight keys missing from sources: {sorted(set(missing))}",
            tuple(sorted(set(missing))),
        )
    for key in keys:
        w_aligned = aligned.load(key)
        w_unaligned = unaligned.load(key)
        if w_aligned.shape != w_unaligned.shape:
            raise PairingError(
                f"{key}: aligned shape {w_aligned.shape} != unaligned shape {w_unaligned.shape}"
            )
        yield key, w_aligned, w_unaligned


def expected_layer_population(num_layers: int, target_modules) -> int:
    """Number of targeted layer components: layers x modules."""
    modules = list(target_modules)
    if num_layers < 1 or not modules:
        raise PolicyError("layer and module counts must be positive")
    return num_layers * len(modules)
