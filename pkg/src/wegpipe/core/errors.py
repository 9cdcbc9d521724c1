"""Exception hierarchy shared by every wegpipe stage."""
from __future__ import annotations

from typing import Optional


class WegpipeError(Exception):
    """Base class for pipeline errors."""

    pass


class ShapeError(WegpipeError, ValueError):
    """Operand shapes do not agree."""

    pass


class NumericError(WegpipeError, ArithmeticError):
    """A computation received or produced non-finite values."""

    pass


class UsageError(WegpipeError, ValueError):
    """An API was called in a way its contract forbids."""

    pass


class ConfigError(WegpipeError, ValueError):
    pass


class FormatError(WegpipeError):
    """A file on disk does not match its declared format."""

    pass


class TrainingError(WegpipeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: Optional[int] = None) -> None:
        super().__init__(message)
        self.epoch = epoch
