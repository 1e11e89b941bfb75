"""
Recovering interaction weights from spike times
===============================================

The log-likelihood of the model is concave in the log weights, and exact
for constant-rate segments, so Newton's method finds the estimate in a
handful of steps.
"""

# %%
import math

import numpy as np

from mipp import inference as inf
from mipp import point_process as pp

net = pp.Network.spi(50.0, 1.2, 0.01, 1.0)
rec = pp.simulate_trial(net, pp.SimConfig(t_end=200.0, seed=11, rate_sample_stride=10**7))
print("events per unit:", rec.counts())

# %% fit only the weights into the output unit
mask = np.array([[False, False], [True, True]])
res = inf.fit(inf.FitProblem([rec], mask))
print("converged:", res.converged, "in", res.n_iter, "iterations")
print("l21:", round(res.log_weights[1, 0], 4), "true", round(math.log(1.2), 4))
print("l22:", round(res.log_weights[1, 1], 4), "true", round(math.log(0.01), 4))
print("log base rate:", np.round(res.log_rates, 4))

# %% several shorter trials pool into one likelihood
recs = pp.simulate_ensemble(net, pp.SimConfig(t_end=40.0, n_trials=5, seed=12,
                                              rate_sample_stride=10**7))
res = inf.fit(inf.FitProblem(recs, mask))
print("pooled l21, l22:", np.round(res.log_weights[1], 4))
