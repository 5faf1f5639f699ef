"""Transformer-based treatment-effect estimation with adversarial propensity regularization."""

from .model import TransTEE, TransTEEConfig, attention_summary
from .tensor import ComputationRecord, ContractError, DimensionError, NumericError, Tensor
from .training import TrainConfig, train

__all__ = [
    "ComputationRecord",
    "ContractError",
    "DimensionError",
    "NumericError",
    "Tensor",
    "TrainConfig",
    "TransTEE",
    "TransTEEConfig",
    "attention_summary",
    "train",
]

__version__ = "0.1.0"
