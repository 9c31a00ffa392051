"""Mutual-channel loss for fine-grained classification, on a from-scratch numpy autodiff engine."""

from .errors import NumericalError, ShapeError, TensorFormatError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ShapeError", "TensorFormatError", "ValidationError", "__version__"]
