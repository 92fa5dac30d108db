"""Incremental Gaussian splat mapping with a language feature field, on CPU."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, SplatfieldError

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "SplatfieldError",
    "__version__",
]
