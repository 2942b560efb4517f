"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """An argument is outside its documented domain."""


class ContractError(RuntimeError):
    """A call violates a stateful precondition (double masking, missing grads...)."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary/JSON layout."""


class ConfigurationError(ValueError):
    """A run or protocol configuration cannot be executed as given."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""
