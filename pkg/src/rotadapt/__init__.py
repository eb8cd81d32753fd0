"""Rotation-prediction domain adaptation with self-distillation."""
from .core import (ConfigError, DataError, DatasetSplit, Example, InputError, LossWeights, NumericFault,
                   Pool, TrainConfig, softmax_probs)
from .models import ModelHandle, ModelSpec, build_model

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DatasetSplit", "Example", "InputError", "LossWeights", "ModelHandle",
    "ModelSpec", "NumericFault", "Pool", "TrainConfig", "build_model", "softmax_probs",
]
