"""Multiplicative-interaction point processes: simulation, rate equations,
rate distributions and likelihood fits."""

from .errors import (ConfigError, DataError, ExplosionError, InstabilityError, MippError,
                     ResolutionError)
from .point_process import (Network, SimConfig, SpikeRecord, WarmUp, simulate_ensemble,
                            simulate_trial, step)
from .rate_dynamics import RateSystem, fixed_points, integrate, spi_closed_form
from .inference import FitProblem, fit

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "ExplosionError", "InstabilityError", "MippError",
    "ResolutionError", "Network", "SimConfig", "SpikeRecord", "WarmUp", "simulate_ensemble",
    "simulate_trial", "step", "RateSystem", "fixed_points", "integrate", "spi_closed_form",
    "FitProblem", "fit",
]
