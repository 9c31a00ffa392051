"""Exception types shared across the package.

The CLI maps :class:`ValidationError` (and plain ``ValueError``) to exit code 1
and :class:`NumericalError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad user input: shapes, ranges, configs, files."""


class ShapeError(ValidationError):
    pass


class TensorFormatError(ValidationError):
    """A tensor or label file that does not parse."""


class NumericalError(RuntimeError):
    """Non-finite values during a forward/backward pass or an optimiser step."""
