"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
