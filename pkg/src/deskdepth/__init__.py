"""Desk-scale self-supervised monocular depth estimation.

Everything runs on a small from-scratch reverse-mode differentiation engine
(`deskdepth.tensor`) so the whole training pipeline is checkable against
finite differences and closed-form oracles on a laptop core.
"""

from .tensor import (
    Tensor,
    Tape,
    constant,
    ShapeMismatch,
    DomainError,
    InvalidAxis,
    NonScalarLoss,
    TapeConsumed,
    NonIntegralOutputSize,
)

__all__ = [
    "Tensor",
    "Tape",
    "constant",
    "ShapeMismatch",
    "DomainError",
    "InvalidAxis",
    "NonScalarLoss",
    "TapeConsumed",
    "NonIntegralOutputSize",
]

__version__ = "0.1.0"
