"""Exception types shared across the package.

Each CLI-facing failure mode gets its own exception class so the command
line tool can map it onto a stable process exit code.
"""


class FutureBevError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FutureBevError):
    """Invalid or inconsistent configuration (bad key, bad value, bad file)."""


class DataError(FutureBevError):
    """Dataset problems: missing files, checksum mismatch, manifest mismatch."""


class TrainingDivergedError(FutureBevError):
    """Raised when the training loss becomes non-finite."""
