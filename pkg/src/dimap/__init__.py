"""Module-aware, data-independent magnitude pruning for hierarchical vision transformers."""

__version__ = "0.1.0"

from .errors import DimapError  # noqa: E402
from .importance import ImportanceTable, layer_scores, magnitude_scores, pool_module  # noqa: E402
from .pruner import MaskSet, PrunePlan, apply, make_plan, preset_ratio  # noqa: E402
from .taxonomy import (  # noqa: E402
    PRESETS,
    ArchConfig,
    LayerEntry,
    ModuleRole,
    classify,
    count_params,
    enumerate_layers,
    estimate_flops,
    synthesize,
)
from .tensor_store import Checkpoint, TensorRecord, read_checkpoint, to_f64, write_checkpoint  # noqa: E402

__all__ = [
    "ArchConfig", "Checkpoint", "DimapError", "ImportanceTable", "LayerEntry", "MaskSet",
    "ModuleRole", "PRESETS", "PrunePlan", "TensorRecord", "apply", "classify", "count_params",
    "enumerate_layers", "estimate_flops", "layer_scores", "magnitude_scores", "make_plan",
    "pool_module", "preset_ratio", "read_checkpoint", "synthesize", "to_f64", "write_checkpoint",
]
