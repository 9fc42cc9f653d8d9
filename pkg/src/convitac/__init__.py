"""Contrastive visual-tactile representation learning on a small autodiff core."""

from .errors import (ConViTacError, ContractError, DegenerateInputError, DimensionError,
                     FormatError, LoadError, ValidationError)
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ConViTacError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "LoadError",
    "Tape",
    "Tensor",
    "ValidationError",
    "backward",
    "grad_check",
]
