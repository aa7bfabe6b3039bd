"""Exception types shared across the package."""


class MheError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MheError, ValueError):
    """Tensor extents or channel counts do not match an operation's contract."""


class ConfigError(MheError, ValueError):
    """Invalid or unknown configuration."""


class DataError(MheError, OSError):
    """Unreadable, missing, or malformed on-disk data."""


class DivergenceError(MheError, ArithmeticError):
    """Training produced NaN/Inf or failed to reduce the loss."""


class CheckFailure(MheError, AssertionError):
    """A verification suite (gradient check) did not pass."""
