"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI returns for it.
"""


class FromMergeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class ValidationError(FromMergeError, ValueError):
    """Inputs violate a documented precondition."""

    exit_code = 1


class ShapeError(ValidationError):
    """Operands have incompatible shapes."""


class CheckpointIOError(FromMergeError):
    """A checkpoint, adapter or report could not be read or written."""

    exit_code = 2


class ParseError(CheckpointIOError):
    """A container file is malformed.

    Args:
        message: Human readable description
        offset: Byte offset in the file where the problem was detected
    """

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericError(FromMergeError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""

    exit_code = 3
