"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DTypeError(TypeError):
    """FP32 and FP64 values were mixed inside one graph."""


class NumericError(ArithmeticError):
    """A quantity left its valid numeric range (zero variance, vanishing denominator, ...)."""


class ContractError(ValueError):
    """A caller-side precondition does not hold."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class CheckpointError(IOError):
    """Malformed, truncated or incomplete checkpoint file."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)
