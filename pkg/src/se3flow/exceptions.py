"""Shared exception types."""


class InvalidArgumentError(ValueError):
    """Raised when an argument violates a documented precondition."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite or degenerate values."""
