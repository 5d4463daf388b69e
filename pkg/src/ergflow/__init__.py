"""Entropy-rectified attention guidance for toy flow-matching models."""

from .tensor import GradientTape, NonFiniteError, Tensor, backward, parameter
from .attention import AttentionLayerWeights, RectificationConfig

__version__ = "0.1.0"

__all__ = [
    "AttentionLayerWeights",
    "GradientTape",
    "NonFiniteError",
    "RectificationConfig",
    "Tensor",
    "backward",
    "parameter",
]
