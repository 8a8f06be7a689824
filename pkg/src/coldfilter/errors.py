"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter value."""


class GridMismatchError(ValueError):
    """Operands were built on different sampling grids."""


class InstabilityError(RuntimeError):
    """Closed-loop simulation diverged.

    Attributes
    ----------
    step : int
        First sample index at which the divergence bound was exceeded.
    bound : float
        Displacement bound that was violated.
    """

    def __init__(self, message: str, step: int, bound: float):
        super().__init__(message)
        self.step = step
        self.bound = bound
