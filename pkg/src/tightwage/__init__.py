"""Labor-market tightness, leave-one-out instruments and fixed-effects wage regressions."""

__version__ = "0.1.0"

from .errors import CollinearityError, ConvergenceError, EstimationError, TightwageError, ValidationError

__all__ = [
    "__version__",
    "TightwageError",
    "ValidationError",
    "EstimationError",
    "CollinearityError",
    "ConvergenceError",
]
