"""Less-Attention Vision Transformer mechanisms at desk scale."""

from lavit.config import ConfigError, Flags, ModelConfig, StageConfig, preset
from lavit.model import LaViTModel, ParameterStore, build, forward, param_count
from lavit.tensor import FlopsMeter, ShapeError, Tape, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Flags",
    "FlopsMeter",
    "LaViTModel",
    "ModelConfig",
    "ParameterStore",
    "ShapeError",
    "StageConfig",
    "Tape",
    "Tensor",
    "build",
    "forward",
    "no_grad",
    "param_count",
    "preset",
]
