"""Exception types raised across the package."""


class ACNormError(Exception):
    """Base class for all package errors."""


class ConfigError(ACNormError, ValueError):
    pass


class InvalidBatchError(ACNormError, ValueError):
    pass


class NumericError(ACNormError, FloatingPointError):
    pass


class SurgeryError(ACNormError):
    pass


class DataError(ACNormError, ValueError):
    pass


class ProbeError(ACNormError):
    pass


class InputError(ACNormError, ValueError):
    pass


class DivergenceError(ACNormError, FloatingPointError):
    pass


class PolicyWarning(UserWarning):
    """A freeze pattern matched no parameter."""
