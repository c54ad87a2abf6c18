"""Exception hierarchy shared by all maxent_gp modules.

Everything raised on a domain-level failure derives from MaxEntError so the
CLI can map it to a single exit code; plain ValueError/TypeError remain for
programming mistakes.
"""

__all__ = [
    "MaxEntError",
    "DomainError",
    "QuadratureEvalError",
    "SaturationError",
    "ConditioningError",
    "ConvergenceError",
    "LineSearchError",
    "DegenerateMomentsError",
    "DegenerateDatasetError",
    "GenerationExhaustedError",
    "DatasetFormatError",
    "ModelFormatError",
    "FitError",
]


class MaxEntError(Exception):
    """Base class for all domain errors in this package."""


class DomainError(MaxEntError, ValueError):
    """Invalid velocity domain or out-of-range configuration value."""


class QuadratureEvalError(MaxEntError):
    """Integrand returned a non-finite value at a quadrature node."""


class SaturationError(MaxEntError):
    """Exponent outside the safe range for exp(); the density is degenerate."""


class ConditioningError(MaxEntError):
    """SPD factorization failed even after the diagonal-jitter retry ladder."""


class ConvergenceError(MaxEntError):
    """Iteration budget exhausted before reaching the requested tolerance."""

    def __init__(self, message: str, grad_norm: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


class LineSearchError(MaxEntError):
    """Backtracking exhausted without satisfying the sufficient-decrease rule."""


class DegenerateMomentsError(MaxEntError, ValueError):
    """Moment vector violates positivity/variance requirements."""


class DegenerateDatasetError(MaxEntError, ValueError):
    """Dataset has a zero-variance column and cannot be scaled."""


class GenerationExhaustedError(MaxEntError):
    """Rejection sampler hit its trial budget before accepting enough pairs."""


class DatasetFormatError(MaxEntError, ValueError):
    """Dataset file could not be parsed."""


class ModelFormatError(MaxEntError, ValueError):
    """Model file could not be parsed or has an unsupported schema version."""


class FitError(MaxEntError):
    """Hyperparameter optimization failed from every start."""

    def __init__(self, message: str, best_spec=None):
        super().__init__(message)
        self.best_spec = best_spec
