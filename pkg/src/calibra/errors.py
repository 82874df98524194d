"""Exception hierarchy shared by all calibra modules."""

from __future__ import annotations


class CalibraError(Exception):
    """Base class for all calibra-specific failures."""


class ShapeError(CalibraError):
    """Operands have incompatible dimensions."""


class SingularMatrixError(CalibraError):
    """A symmetric solve hit a pivot below tolerance (rank deficiency)."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class InsufficientDataError(CalibraError):
    """Fewer observations than parameters (or otherwise too few rows)."""


class SchemaError(CalibraError):
    """A dataset is missing required columns or violates the input schema."""

    def __init__(self, violations: list[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        super().__init__("; ".join(violations))
        self.violations = list(violations)


class ConvergenceError(CalibraError):
    """An iterative solver did not converge; carries the iteration trace."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(CalibraError):
    """Logistic fit detected (quasi-)complete separation."""


class ScenarioError(CalibraError):
    """A Monte Carlo scenario failed too many replicates to be trusted."""
