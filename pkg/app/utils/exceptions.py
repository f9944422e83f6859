"""Exception hierarchy shared by every service.

All errors raised on purpose by the package derive from ``LowRankError`` so
the command line can turn them into a one-line diagnostic and exit code 1.
"""
from builtins import Exception, ValueError
from typing import Any, Optional


class LowRankError(Exception):
    """Base class for all package errors."""


class InvalidInput(LowRankError, ValueError):
    pass


class NumericalFailure(LowRankError):
    pass


class ShapeError(LowRankError, ValueError):
    pass


class DegenerateSpectrum(LowRankError, ValueError):
    pass


class SequenceError(LowRankError, ValueError):
    pass


class NotEnoughData(LowRankError):
    pass


class RankError(LowRankError, ValueError):
    pass


class OriginError(LowRankError, ValueError):
    pass


class PlanError(LowRankError, ValueError):
    pass


class ProfileError(LowRankError):
    pass


class FormatError(LowRankError, ValueError):
    pass


class ConfigError(LowRankError, ValueError):
    pass


class DatasetError(LowRankError, ValueError):
    pass


class OutputError(LowRankError):
    """An output file or directory could not be written."""


class DivergenceError(LowRankError):
    """Raised when the training loss stops being finite or explodes.

    The partially filled report is attached so callers can still persist it.
    """

    def __init__(self, message: str, partial_report: Optional[Any] = None):
        super().__init__(message)
        self.partial_report = partial_report
