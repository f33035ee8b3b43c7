"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4.
"""


class DesksegError(Exception):
    """Base class for all package errors."""


class ConfigError(DesksegError):
    """Invalid, unknown, or ill-typed configuration."""


class DataError(DesksegError):
    """Problems with datasets, files, or their contents."""


class SceneInfeasibleError(DataError):
    """Object placement failed within the retry budget for a config."""


class SceneParseError(DataError):
    """Malformed scene / boxes / prediction file."""

    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class CheckpointError(DataError):
    """Checkpoint failed to load or does not match the current setup."""


class NumericError(DesksegError):
    """Non-finite loss or other numeric failure during training."""
