"""
Winner takes all
================

Two units with equal input compete through mutual inhibition.  Both
single-winner states are attractive, the shared state is a saddle, so each
trial picks a winner at random.
"""

# %%
import numpy as np

from mipp import experiments as ex

table = ex.wta_stability(ex.wta_network())
for name, fp in table.items():
    print(f"{name:13s} y={np.round(fp.y_star, 3)}  {fp.stability:11s} "
          f"eig={np.round(np.real(fp.eigenvalues), 3)}")

# %% symmetric input
rep = ex.run_wta(n_trials=100, seed=0)
print("wins:", rep.observed["wins"]["value"], "undecided:", rep.observed["undecided"]["value"])
print("binomial p-value:", round(rep.observed["binomial_pvalue"]["value"], 3))

# %% a tenfold input advantage settles the contest
rep = ex.run_wta(n_trials=100, seed=1, input_rates=(20.0, 2.0))
print("wins with input (20, 2):", rep.observed["wins"]["value"])
