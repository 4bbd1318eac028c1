"""Exception types shared across the package."""

from __future__ import annotations


class GridstepError(Exception):
    """Base class for all errors raised by this package."""


class CaseParseError(GridstepError):
    """A case file could not be parsed (syntax or missing structure)."""


class NetworkValidationError(GridstepError):
    """A network or delta violates a structural invariant."""


class LayoutError(GridstepError):
    """A state vector does not match the layout it is used with."""


class InputError(GridstepError):
    """An argument violates a documented precondition."""


class SingularJacobianError(GridstepError):
    """The linear solver hit a structurally or numerically singular matrix."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class SolveFailure(GridstepError):
    """A solve ended without convergence; carries the report if available."""

    def __init__(self, message: str, report=None, state=None):
        super().__init__(message)
        self.report = report
        self.state = state


class HomotopyStalled(SolveFailure):
    """The continuation could not advance below some gamma.

    Carries the last accepted gamma and state so callers can inspect how
    far the path got before the step size underflowed.
    """

    def __init__(self, message: str, gamma: float, state=None, report=None):
        super().__init__(message, report=report, state=state)
        self.gamma = gamma
