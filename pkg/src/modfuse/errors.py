"""Exception hierarchy. The CLI maps each class to a fixed exit code."""


class ModfuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ModfuseError, ValueError):
    """Tensor dimensions do not satisfy an operation's shape rule."""


class ConfigError(ModfuseError, ValueError):
    """Invalid configuration value, key, or model geometry."""


class DataError(ModfuseError, ValueError):
    """Malformed, missing, or inconsistent dataset content."""


class UsageError(ModfuseError, RuntimeError):
    """An API was called in a state it does not support."""


class DivergenceError(ModfuseError, ArithmeticError):
    """Training produced a non-finite loss."""
