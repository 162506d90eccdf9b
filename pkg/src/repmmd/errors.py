"""Exception types shared across the package."""


class ReproError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ReproError, ValueError):
    """A component was asked to do something its configuration forbids."""


class ShapeError(ConfigurationError):
    """Tensor extents do not agree."""


class UsageError(ReproError, RuntimeError):
    """An API was called out of order (e.g. backward with a stale cache)."""


class EstimatorError(ReproError, ValueError):
    """A statistic is undefined for the given sample sizes."""


class OracleError(ReproError, ArithmeticError):
    """A verification oracle hit a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NonFiniteError(ReproError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


class NonConvergenceError(ReproError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, best=None, residual: float | None = None):
        super().__init__(message)
        self.best = best
        self.residual = residual
