"""Exception types shared across the package."""
from __future__ import annotations


class InvalidParametersError(ValueError):
    """A model parameter set violates its invariants."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed to converge."""

    def __init__(self, message: str, mismatch: float | None = None, step: int | None = None):
        super().__init__(message)
        self.mismatch = mismatch
        self.step = step


class SingularKKTError(ArithmeticError):
    """The KKT matrix of a Gauss-Newton step is singular or ill-conditioned."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class UnobservableError(SingularKKTError):
    """The measurement set and constraints do not determine the state."""


class ConfigError(ValueError):
    """Malformed run configuration."""
