"""Token purging for backpropagation-free test-time adaptation of point-cloud transformers."""

from purge_gate.errors import (
    ConfigError,
    FormatError,
    InvalidArgumentError,
    InvalidStateError,
    ShapeMismatchError,
    TrainingFailure,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "InvalidArgumentError",
    "InvalidStateError",
    "ShapeMismatchError",
    "TrainingFailure",
]
