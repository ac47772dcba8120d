"""Minimal dense-tensor numerics with reverse-mode gradients."""

from . import ops
from .gradcheck import CheckResult, GradCase, check_gradients, numerical_gradient, relative_error
from .tensor import (ConfigError, DimensionError, NumericError, Tape, Tensor,
                     active_tape, as_tensor)

__all__ = [
    "ops", "Tensor", "Tape", "active_tape", "as_tensor",
    "NumericError", "DimensionError", "ConfigError",
    "CheckResult", "GradCase", "check_gradients", "numerical_gradient", "relative_error",
]
