"""Exception types shared across the package."""


class MippError(Exception):
    """Base class for all errors raised by :mod:`mipp`."""


class ExplosionError(MippError):
    """A rate or a rate-equation trajectory exceeded the divergence guard.

    Attributes
    ----------
    trial_index : int or None
        Trial in which the explosion happened (simulation only).
    time : float or None
        Model time at which the guard was triggered.
    """

    def __init__(self, message, trial_index=None, time=None):
        super().__init__(message)
        self.trial_index = trial_index
        self.time = time


class ResolutionError(MippError):
    """The rate grid is too coarse for the requested multiplicative shifts."""


class InstabilityError(MippError):
    """The explicit master-equation scheme produced negative densities or lost mass."""


class DataError(MippError):
    """Spike data inconsistent with the model (e.g. events outside the record)."""


class ConfigError(MippError):
    """Invalid configuration text.

    ``line`` is set for syntax errors, ``key`` for semantic errors.
    """

    def __init__(self, message, line=None, key=None):
        super().__init__(message)
        self.line = line
        self.key = key
