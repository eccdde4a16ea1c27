"""Token-sharing transformer for lightweight monocular depth estimation, on a numpy autodiff core."""

from .errors import ConfigError, DomainError, EvaluationError, FormatError, NumericalError, TSTError, UsageError
from .model import ModelConfig, TSTModel, build_model
from .tensor import Tensor, no_grad, precision

__all__ = [
    "ConfigError",
    "DomainError",
    "EvaluationError",
    "FormatError",
    "ModelConfig",
    "NumericalError",
    "TSTError",
    "TSTModel",
    "Tensor",
    "UsageError",
    "build_model",
    "no_grad",
    "precision",
]
