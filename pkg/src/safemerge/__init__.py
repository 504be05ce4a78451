"""Score-guided selective merging of LoRA adapters against safety-aligned
reference weights, with projection and negated-task-vector baselines."""

__version__ = "0.1.0"

from .adapter_io import (  # noqa: E402
    AdapterBundle,
    CheckpointSource,
    InMemorySource,
    LoraLayer,
    NamingProfile,
    expected_layer_population,
    load_adapter,
    read_safetensors,
    write_adapter,
    write_safetensors,
)
from .merging import MergePolicy  # noqa: E402
from .pipeline import (  # noqa: E402
    EvalScores,
    MergeReport,
    SweepGrid,
    run_analyze,
    run_resta,
    run_safelora,
    run_safemerge,
    safety_score,
    sweep,
)
from .subspace import SubspaceOperator, alignment_matrix, apply_C, cosine_score  # noqa: E402
from .tensor_core import (  # noqa: E402
    LowRankFactors,
    Matrix,
    densify,
    frobenius_inner,
    frobenius_norm,
    matmul,
    truncated_svd_of_factors,
)

__all__ = [
    "__version__",
    "AdapterBundle",
    "CheckpointSource",
    "EvalScores",
    "InMemorySource",
    "LoraLayer",
    "LowRankFactors",
    "Matrix",
    "MergePolicy",
    "MergeReport",
    "NamingProfile",
    "SubspaceOperator",
    "SweepGrid",
    "alignment_matrix",
    "apply_C",
    "cosine_score",
    "densify",
    "expected_layer_population",
    "frobenius_inner",
    "frobenius_norm",
    "load_adapter",
    "matmul",
    "read_safetensors",
    "run_analyze",
    "run_resta",
    "run_safelora",
    "run_safemerge",
    "safety_score",
    "sweep",
    "truncated_svd_of_factors",
    "write_adapter",
    "write_safetensors",
]
