"""Exception hierarchy. Each family maps to a CLI exit code."""


class TFMError(Exception):
    exit_code = 5


class ConfigError(TFMError, ValueError):
    exit_code = 2


class DataError(TFMError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed file. ``offset`` is the byte (or row) where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class MaskCorruptionError(FormatError):
    pass


class CapacityError(TFMError):
    exit_code = 4


class InvariantError(TFMError, AssertionError):
    exit_code = 5


class DimensionError(TFMError, ValueError):
    exit_code = 5


class NonFiniteError(TFMError, FloatingPointError):
    exit_code = 5


class InvalidMaskError(TFMError, ValueError):
    exit_code = 5


class TaskNotRegisteredError(TFMError, LookupError):
    exit_code = 5


class UsageError(TFMError, RuntimeError):
    exit_code = 5
