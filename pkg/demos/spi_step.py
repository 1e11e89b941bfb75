"""
Stochastic perfect integrator: response to a step in input rate
================================================================

One input unit drives one output unit that inhibits itself.  The rate
equation predicts a smooth approach to a fixed rate; the simulated ensemble
overshoots first and then settles.
"""

# %% setup
import math

import numpy as np

from mipp import rate_dynamics as rd
from mipp import experiments as ex

lam, w21, w22 = 50.0, 1.2, 0.01
eq = rd.spi_equilibrium(lam, math.log(w21), math.log(w22))
print(f"predicted equilibrium rate {eq:.4f} Hz")

# %% step from rate 1 without warm-up
rep = ex.run_spi_nonadiabatic(n_trials=1000, seed=0, t_end=2.0)
print("observed equilibrium :", round(rep.observed["equilibrium_rate"]["value"], 4))
print("early max deviation  :", round(rep.observed["early_max_deviation"]["value"], 3))
print("late rms deviation   :", round(rep.observed["late_rms_deviation"]["value"], 3))

t, est, ric = rep.traces["time"], rep.traces["estimate"], rep.traces["riccati"]
for s in (0.05, 0.1, 0.2, 0.5, 1.0, 1.9):
    k = np.searchsorted(t, s)
    print(f"t={s:4.2f}  kernel {est[k]:6.2f}  ode {ric[k]:6.2f}")

# %% warm the network up first, so the step starts from equilibrium
lam_wu = rd.warm_up_rate(math.log(w21), math.log(w22))
print(f"warm-up input rate {lam_wu:.4f} Hz gives output rate 1")
rep = ex.run_spi_adiabatic(n_trials=1000, seed=0, t_end=1.0)
print("rate just before the step:", round(rep.observed["pre_step_rate"]["value"], 3))
print("max relative deviation   :", round(rep.observed["max_relative_deviation"]["value"], 3))
