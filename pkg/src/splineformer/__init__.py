"""Image-to-spline guidewire shape estimation on a small numpy autodiff engine."""

from .errors import CheckpointError, DomainError, FitError, NumericError, ShapeError

__version__ = "0.1.0"
