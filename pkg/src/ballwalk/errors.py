"""Exception types shared across the package.

Errors are split by failure mode: bad caller input (DomainError,
ConfigurationError), numerical trouble (NumericError and subclasses),
and structural problems detected while building group data
(PingPongError, InsufficientDepthError, CoveringError, BudgetError).
"""


class BallwalkError(Exception):
    """Base class for all package errors."""


class DomainError(BallwalkError, ValueError):
    """Input outside the documented domain (point not in the ball, etc.)."""


class ConfigurationError(BallwalkError, ValueError):
    """Malformed or inconsistent configuration data."""


class NumericError(BallwalkError, RuntimeError):
    """Numerical procedure failed (non-convergence, degenerate data)."""


class TruncationError(NumericError):
    """A truncated limit did not converge within the allowed horizon."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class QuadratureError(NumericError):
    """Composite quadrature failed its refinement check."""


class PingPongError(BallwalkError, ValueError):
    """Generator caps overlap or fail the mapping check."""


class InsufficientDepthError(BallwalkError, ValueError):
    """Enumerated group data is too shallow for the requested operation."""


class CoveringError(BallwalkError, RuntimeError):
    """Annulus shadows fail to cover the sampled limit set."""


class BudgetError(BallwalkError, RuntimeError):
    """An enumeration or sampling budget was exceeded."""

    def __init__(self, message, budget=None):
        super().__init__(message)
        self.budget = budget


class ConstantsError(BallwalkError, RuntimeError):
    """Measured constants violate a relation the construction relies on."""
