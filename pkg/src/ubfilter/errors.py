"""Exception types shared across the package."""


class NumericalFailure(FloatingPointError):
    """A discretized path produced a non-finite state.

    ``step`` is the index of the offending Milstein step within the unit
    interval and ``level`` the discretization level, when known.
    """

    def __init__(self, message, step=None, level=None):
        super().__init__(message)
        self.step = step
        self.level = level


class WeightCollapse(FloatingPointError):
    """Every particle weight underflowed (or was NaN) so the ensemble cannot be normalized."""

    def __init__(self, message, time=None, ensemble=None):
        super().__init__(message)
        self.time = time
        self.ensemble = ensemble


class ConfigError(ValueError):
    """Invalid experiment or randomization configuration."""
