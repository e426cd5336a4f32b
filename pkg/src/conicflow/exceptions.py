"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes or arguments."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class IntegrationError(NumericalError):
    """ODE integration failed (step underflow or non-finite state)."""

    def __init__(self, message, t=None, index=None):
        super().__init__(message)
        self.t = t
        self.index = index
