"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class TractoError(Exception):
    """``offset``, when given, is the byte position of a fault in a binary file."""

    exit_code = 1

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidInputError(TractoError, ValueError):
    exit_code = 3


class FormatError(TractoError):
    """Malformed or truncated data file."""

    exit_code = 4


class CheckpointError(TractoError):
    """Missing, corrupt or incompatible weight checkpoint."""

    exit_code = 5


class NumericError(TractoError, ArithmeticError):
    exit_code = 6
