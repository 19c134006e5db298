"""Shared exception types."""


class SaaPdeError(Exception):
    """Base class for all library errors."""


class CoefficientBoundError(SaaPdeError, ValueError):
    """A coefficient field violates its positivity / bound contract."""


class NonConvergenceError(SaaPdeError, RuntimeError):
    """An iterative solver hit its iteration cap.

    Carries the final residual so callers can report how far the
    iteration got.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class OutOfNeighborhoodError(SaaPdeError, ValueError):
    """A control left the well-posedness neighborhood of the admissible set."""


class ConfigError(SaaPdeError, ValueError):
    """Invalid or unknown configuration input."""
