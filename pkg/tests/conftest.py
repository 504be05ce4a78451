import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    outcomes = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "ERROR")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(rep, "when", "call") in ("call", "setup"):
                outcomes.append((nodeid.split("::")[-1], label))
    if outcomes:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, label in sorted(set(outcomes)):
            terminalreporter.write_line(f"[{label}] {name}")

from safemerge.adapter_io import AdapterBundle, LoraLayer
from safemerge.tensor_core import LowRankFactors, Matrix


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def rand_matrix(gen: np.random.Generator, rows: int, cols: int, scale: float = 1.0) -> Matrix:
    return Matrix((gen.standard_normal((rows, cols)) * scale).astype(np.float32))


def rand_factors(
    gen: np.random.Generator, d_out: int, d_in: int, rank: int, scale: float = 1.0
) -> LowRankFactors:
    return LowRankFactors(
        rand_matrix(gen, d_out, rank, 0.5), rand_matrix(gen, rank, d_in, 0.5), scale
    )


def rand_layer(
    gen: np.random.Generator,
    key: str = "model.layers.0.self_attn.q_proj",
    d_out: int = 16,
    d_in: int = 12,
    rank: int = 4,
    lora_alpha: float = 8.0,
) -> LoraLayer:
    return LoraLayer(
        key,
        rand_matrix(gen, rank, d_in, 0.5),
        rand_matrix(gen, d_out, rank, 0.5),
        rank,
        lora_alpha,
    )


def bundle_of(layers: list[LoraLayer]) -> AdapterBundle:
    modules = sorted({l.module_suffix for l in layers})
    return AdapterBundle({l.key: l for l in layers}, tuple(modules))


@pytest.fixture
def gen() -> np.random.Generator:
    return rng(1234)
