"""Exception types shared across the package."""


class SkinTempError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SkinTempError, ValueError):
    """A configuration value or key is invalid. Message names the key."""


class BoundsError(SkinTempError, ValueError):
    """A region of interest or index falls outside the frame bounds."""


class ShapeMismatchError(SkinTempError, ValueError):
    """An array does not have the shape an operation requires."""


class InsufficientDataError(SkinTempError, ValueError):
    """Too few samples, frames, or subjects for the operation."""


class DegenerateDataError(SkinTempError, ValueError):
    """Input data has no usable variation (e.g. constant regressor)."""


class OutOfRangeError(SkinTempError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class DivergenceError(SkinTempError, RuntimeError):
    """Training produced a non-finite loss. Message reports the batch index."""
