"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and contract problems
exit with 1, I/O and file-format problems exit with 2.
"""


class JointAttnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(JointAttnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(JointAttnError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(JointAttnError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(JointAttnError, ValueError):
    """A binary file does not match its declared layout."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
