"""Exception hierarchy shared by every stage.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericError` to exit code 3.
"""


class DiffeoPAError(Exception):
    """Base class for all package errors."""


class ValidationError(DiffeoPAError, ValueError):
    """Input violates a documented precondition."""


class NumericError(DiffeoPAError, ArithmeticError):
    """A numerical routine failed (no root, non-finite state, ...)."""


class DegenerateDataError(NumericError):
    """Data carry no usable variation (e.g. pooled SD is zero)."""


class DivergenceError(NumericError):
    """Geodesic integration produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StageError(DiffeoPAError):
    """A pipeline stage failed; carries the stage name and offending participants."""

    def __init__(self, stage, participants, cause):
        self.stage = stage
        self.participants = list(participants)
        self.cause = cause
        ids = ", ".join(str(p) for p in self.participants[:10])
        more = "" if len(self.participants) <= 10 else f" (+{len(self.participants) - 10} more)"
        super().__init__(f"stage '{stage}' failed for [{ids}{more}]: {cause}")
