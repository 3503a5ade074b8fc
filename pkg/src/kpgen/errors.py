"""Exception types shared across the package."""


class KpgenError(Exception):
    """Base class for all package errors."""


class DimensionError(KpgenError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(KpgenError, FloatingPointError):
    """A NaN or infinite value appeared where it is not allowed."""


class ConfigError(KpgenError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(KpgenError, ValueError):
    """Input data is malformed or violates a data invariant."""


class CheckpointError(KpgenError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
