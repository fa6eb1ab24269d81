"""Exception types shared across the package."""


class LightCapError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LightCapError, ValueError):
    """Tensor or matrix shapes are incompatible for the requested op."""


class NumericError(LightCapError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParameterError(LightCapError, ValueError):
    """A hyperparameter is outside its valid range (e.g. tau <= 0)."""


class FormatError(LightCapError, ValueError):
    """A file does not conform to its declared binary/text format.

    ``offset`` carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(LightCapError, IndexError):
    """An id or index is outside the valid range."""


class RegionError(LightCapError, ValueError):
    """A region is degenerate or outside the unit square."""


class UsageError(LightCapError, ValueError):
    """The caller violated an API precondition."""


class StateError(LightCapError, RuntimeError):
    """Mutable state (e.g. a decode cache) is inconsistent with the inputs."""


class ConfigError(LightCapError, ValueError):
    """A configuration is internally inconsistent (e.g. head-count mismatch)."""
