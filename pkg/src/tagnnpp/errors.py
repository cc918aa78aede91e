"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """An operation produced (or was fed) NaN or Inf."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
