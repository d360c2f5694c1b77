"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems -> 2, data problems -> 3,
numeric failures -> 4.
"""


class VQNervError(Exception):
    """Base class for all package errors."""


class DimensionError(VQNervError):
    """Tensor shapes are incompatible with an operation."""


class ParameterError(VQNervError):
    """An argument value is outside its legal range."""


class ConfigError(VQNervError):
    """A run or model configuration failed validation."""


class DataError(VQNervError):
    """Input data (frame files, datasets) is missing or malformed."""


class NumericError(VQNervError):
    """A numeric guard tripped (NaN/Inf values, overflow risk)."""


class StateError(VQNervError):
    """A stateful object was used before it was ready."""


class IntegrityError(VQNervError):
    """A serialized artifact is corrupt or from an unsupported version."""


class ContractError(VQNervError):
    """An API precondition was violated by the caller."""
