"""Granularity-controlled parameter-efficient tuning on a toy
encoder-decoder transformer, with independent verification oracles."""

from .config import ConfigError, ExperimentConfig
from .granularity import GranularityController, GranularityLevel
from .harness import RunResult, build_model, count_params, run_ablation_grid, run_experiment
from .modifications import BaselineModification, MultiHeadModification, Variant
from .tensor import ContractError, DimensionError, Rng, Tensor

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "ExperimentConfig",
    "GranularityController",
    "GranularityLevel",
    "BaselineModification",
    "MultiHeadModification",
    "Variant",
    "RunResult",
    "Rng",
    "Tensor",
    "build_model",
    "count_params",
    "run_ablation_grid",
    "run_experiment",
]
