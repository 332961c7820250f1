"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class XMHError(Exception):
    """Base class for all library errors."""
    exit_code: int = 1


# --- Validation (exit 1) ---
class ValidationError(XMHError):
    """Invalid input, argument or configuration."""
    exit_code = 1


class DimensionError(ValidationError):
    """Tensor shapes do not line up."""


class ConfigError(ValidationError):
    """Training config or CLI arguments could not be accepted."""

    def __init__(self, message: str, key: str = None, line: int = None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where = f"key '{key}'"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(f"{where}{message}")


# --- Numeric failures (exit 2) ---
class NumericError(XMHError):
    """NaN/Inf or a failed numerical verification."""
    exit_code = 2


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, record=None):
        self.record = record
        super().__init__(message)


# --- Storage (exit 3) ---
class StorageError(XMHError):
    """Reading or writing an artifact failed."""
    exit_code = 3


class NotFoundError(StorageError, FileNotFoundError):
    """A required file or directory does not exist."""


class VersionError(StorageError):
    """Artifact header declares an unsupported format version."""


class CorruptDataError(StorageError):
    """Artifact header or payload is malformed or truncated."""
