"""
Distribution of rates in the stochastic perfect integrator
==========================================================

The master equation is solved on a log-spaced grid and compared with a
long simulation.  The moment hierarchy is then examined: its equilibrium
recursion is exact, its finite truncations are not stable.
"""

# %% master equation
import math

import numpy as np

from mipp import rate_dynamics as rd
from mipp import spi_distribution as sd
from mipp import experiments as ex
from mipp.errors import InstabilityError

lam, w21, w22 = 50.0, 1.2, 0.01
r = sd.default_grid(lam, w21, w22, 2048)
run = sd.evolve_master(sd.lognormal_density(r, 0.0, 0.05), lam, w21, w22, 20.0,
                       record_every=5.0)
for t, mu in zip(run.times, run.moments):
    print(f"t={t:5.1f}  mass {mu[0]:.9f}  mean {mu[1]:.5f}")
print("mass drift per unit time:", f"{run.mass_drift_rate:.2e}")
print("rate-equation fixed point:", rd.spi_equilibrium(lam, math.log(w21), math.log(w22)))

# %% shape of the equilibrium density, on log r
mu_log, var_log = run.density.log_moments()
print(f"log-rate mean {mu_log:.3f}, sd {math.sqrt(var_log):.3f}")

# %% simulation
rep = ex.run_equilibrium_histogram(n_trials=100, seed=0, t_end=50.0)
print("simulated log-rate sd:", round(rep.observed["log_rate_sd"]["value"], 3))
print("skewness             :", round(rep.observed["log_rate_skewness"]["value"], 3))

# %% equilibrium moment recursion
eq = rd.spi_equilibrium(lam, math.log(w21), math.log(w22))
mu = sd.equilibrium_recursion(lam, w21, w22, eq, 10).mu
slopes = np.diff(np.log(mu[1:])) - np.diff(np.log(mu[:-1]))
print("second differences of log mu_n:", np.round(slopes, 4))
print("ln w21 =", round(math.log(w21), 4))

# %% truncated hierarchy
try:
    sd.integrate_moments(mu, lam, w21, w22, np.linspace(0, 1, 11), closure="equilibrium")
except InstabilityError as e:
    print("hierarchy:", e)
