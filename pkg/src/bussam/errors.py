"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config errors exit 1, data and
format errors exit 2, failed numeric checks exit 3.
"""


class BussamError(Exception):
    exit_code = 1


class ConfigError(BussamError, ValueError):
    """Invalid hyperparameters or incompatible shapes in a configuration."""


class UsageError(BussamError, ValueError):
    """An API was called with arguments violating its preconditions."""


class DataError(BussamError):
    """Malformed or unreadable input data."""

    exit_code = 2


class PgmFormatError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint file is corrupt or from an unsupported format version."""


class NonFiniteError(BussamError, FloatingPointError):
    exit_code = 3

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class CheckFailure(BussamError):
    exit_code = 3
