# %% [markdown]
# # Tolling a two-link road network
#
# A walk through the mediator on the smallest interesting instance: two
# players, two parallel roads from `s` to `t`.  Road 0 gets slower with
# traffic (`l(y) = y`); road 1 always costs 2.
#
# Run with `python demos/walkthrough.py`, or open it as a notebook with jupytext.

# %%
import math

import numpy as np

from flowtoll.game_core import average_cost, congestion, marginal_tolls
from flowtoll.io import builtin_instance
from flowtoll.mediator import flowtoll
from flowtoll.oracles import brute_force_opt, best_response_dynamics, fractional_opt, verify_nash

inst = builtin_instance("pigou2")
print(inst.n, "players,", inst.m, "edges, gamma =", inst.gamma)

# %% [markdown]
# ## Selfish routing versus the optimum
#
# Without tolls both players pile onto road 0 (each pays 2, and no one
# gains by switching).  The social optimum splits them, average cost 1.5.

# %%
x_opt, opt = brute_force_opt(inst)
nash, _ = best_response_dynamics(inst, np.array([[1.0, 0.0], [1.0, 0.0]]))
print("optimum", opt, "paths", x_opt.tolist())
print("untolled equilibrium cost", average_cost(inst, nash))
print("fractional relaxation", round(fractional_opt(inst), 6))

# %% [markdown]
# ## Marginal-cost tolls
#
# Charging each road the extra latency its last user imposes on the others
# turns the optimum into an equilibrium.

# %%
y = congestion(x_opt)
print("tolls at the optimum", marginal_tolls(inst, y))
print("optimum is Nash under these tolls:", verify_nash(inst, x_opt, eta=1e-9, functional=True)[0])

# %% [markdown]
# ## The mediator, noise-free
#
# With `eps = inf` the solver is exact and the only randomness is the
# rounding of the fractional flow.  When the rounding splits the players
# the outcome is optimal.  When both land on the same road, both are
# repaired at once against the same released congestion and both move,
# so the average cost stays at 2.

# %%
costs = []
for seed in range(200):
    out = flowtoll(inst, list(inst.demands), math.inf, 1e-3, 0.05, np.random.default_rng(seed))
    costs.append(average_cost(inst, np.stack(out.suggestions)))
print("mean cost over 200 seeds", np.mean(costs), "(1.5 with a split rounding, 2.0 otherwise)")

# %% [markdown]
# ## The mediator with privacy
#
# At `eps = 1` the congestion release is noisy and the tolls follow the
# noisy loads.  The ledger records exactly two charges.

# %%
out = flowtoll(inst, list(inst.demands), 1.0, 1e-3, 0.05, np.random.default_rng(0))
print("released congestion", out.noisy_congestion.round(3))
print("tolls", out.tolls.round(3))
for c in out.budget.charges:
    print(c.mechanism, c.epsilon, c.delta)
