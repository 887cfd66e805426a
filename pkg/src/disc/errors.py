"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class DiscError(Exception):
    exit_code = 1


class ConfigError(DiscError, ValueError):
    exit_code = 2


class ProtocolError(DiscError):
    """An experiment was driven out of order (e.g. no initial model)."""

    exit_code = 2


class DataError(DiscError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class DegenerateBatchError(DataError):
    pass


class LabelError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class StructureError(DataError):
    """Layer layout of a model and a statistics snapshot disagree."""


class WrongModelError(DataError):
    """Snapshot fingerprint does not match the model it is plugged into."""


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DiscError, ArithmeticError):
    exit_code = 4
