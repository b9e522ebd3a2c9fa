"""Exception hierarchy shared by the library and the command line.

Every error derives from :class:`CtrlMVError` and from the closest builtin, so callers
can catch either the package error or e.g. ``ValueError``.
"""

from typing import Optional


class CtrlMVError(Exception):
    """Base class for all ctrlmv errors."""


class InvalidStateError(CtrlMVError, ValueError):
    """Non-finite wealth, returns or actions."""


class InvalidParameterError(CtrlMVError, ValueError):
    """Actor, critic or market parameters violate their invariants."""


class DimensionMismatchError(CtrlMVError, ValueError):
    pass


class DegeneracyError(CtrlMVError, ArithmeticError):
    """Singular or ill-conditioned matrix, zero variance, or undefined closed form."""


class InvalidScheduleError(CtrlMVError, ValueError):
    """Learning-rate or projection schedule is unusable (e.g. empty projection set)."""


class DegenerateActionError(CtrlMVError, ArithmeticError):
    """Risky-only normalization of an action whose components sum to zero."""


class NumericalOverflowError(CtrlMVError, ArithmeticError):
    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class PanelFormatError(CtrlMVError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column!r}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(CtrlMVError, ValueError):
    pass


class UndefinedMetricError(CtrlMVError, ArithmeticError):
    """A performance ratio whose denominator is zero."""


class ConvergenceError(CtrlMVError, RuntimeError):
    pass


class InfeasibleProblemError(CtrlMVError, ValueError):
    pass


class UnknownStrategyError(CtrlMVError, ValueError):
    pass


class MissingSideDataError(CtrlMVError, ValueError):
    """A strategy needs factor, market or market-cap data that was not supplied."""


class ConfigError(CtrlMVError, ValueError):
    pass
