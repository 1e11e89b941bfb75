"""
A driven excitatory/inhibitory pair
===================================

Unit 1 receives input and excites unit 2, which inhibits unit 1 back.  The
rate equation has a single interior fixed point; a trial started far above
it oscillates toward it.
"""

# %%
import numpy as np

from mipp import experiments as ex

net = ex.oscillator_network()
fp = ex.oscillator_prediction(net)
print("fixed point :", np.round(fp.y_star, 4), fp.stability)
print("eigenvalues :", np.round(fp.eigenvalues, 4))

# %% one long trial
rep = ex.run_oscillator(seed=0)
obs = rep.observed["rates"]["value"]
print("second-half means  :", np.round(obs, 3))
print("relative deviation :", np.round(rep.discrepancies["relative"], 4))

# %% the input itself is noisy; rescale by the count it actually produced
ic = rep.observed["input_count"]
print(f"input count {ic['value']} vs expected {ic['expected']:.0f}")
print("corrected prediction:", np.round(rep.predicted["corrected_rates"], 4))
print("relative deviation  :", np.round(rep.discrepancies["relative_corrected"], 4))

# %% a few rate samples from the trace
t, a, b = rep.traces["time"], rep.traces["rate_driven"], rep.traces["rate_partner"]
for k in range(0, 200, 20):
    print(f"t={t[k]:4.2f}  {a[k]:9.2f}  {b[k]:9.2f}")
