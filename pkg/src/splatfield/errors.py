"""Error taxonomy shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class SplatfieldError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SplatfieldError):
    """Bad or inconsistent configuration (unknown keys, invalid values)."""

    exit_code = 2


class DataError(SplatfieldError):
    """Malformed or missing input data (streams, checkpoints, embeddings)."""

    exit_code = 3


class NumericalError(SplatfieldError):
    """Non-finite state or a numerically impossible request."""

    exit_code = 4
