"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Array or feature shapes are inconsistent."""


class ConfigError(ValueError):
    """A configuration document or architecture setting is invalid."""


class FormatError(ValueError):
    """A volume or checkpoint file is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""
