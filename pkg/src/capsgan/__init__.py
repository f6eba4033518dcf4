"""Capsule-critic Wasserstein GANs on a from-scratch autodiff core."""

from .tensor import (
    NORM_EPS,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    TensorError,
    finite_difference_check,
    grad,
    paused,
    precision,
)

__version__ = "0.1.0"

__all__ = [
    "NORM_EPS",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "TensorError",
    "finite_difference_check",
    "grad",
    "paused",
    "precision",
    "__version__",
]
