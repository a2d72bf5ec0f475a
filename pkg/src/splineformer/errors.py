"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class FitError(ArithmeticError):
    """Least-squares spline fit could not be solved reliably."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or has a bad header."""
