"""Exception hierarchy shared across the package."""


class TightwageError(Exception):
    """Base class for all package errors."""


class ValidationError(TightwageError):
    """Input data violates a schema or a record invariant."""


class EstimationError(TightwageError):
    """A model could not be estimated on the supplied sample."""


class CollinearityError(EstimationError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"column {column!r} is collinear with the fixed effects or other regressors")


class ConvergenceError(EstimationError):
    """An iterative routine hit its iteration cap.

    ``last`` carries the final iterate (or a summary of it) so callers can
    inspect how far off the routine was.
    """

    def __init__(self, message, last=None, delta=None):
        super().__init__(message)
        self.last = last
        self.delta = delta
