# %% [markdown]
# # Does lying help?
#
# Measure, for one player, how much each deviation in the canonical menu
# changes its expected cost.  Positive gain means the deviation pays off.
# Both arms of each trial share a seed, so the truthful "identity" row is
# exactly zero.

# %%
import math

from flowtoll.io import generate_instance
from flowtoll.mediator import eta_game_bound
from flowtoll.oracles import brute_force_opt, canonical_menu, measure_deviation_gain

inst = generate_instance("layered-DAG", 3, 8, "affine", seed=5)
_, opt = brute_force_opt(inst)
print(inst.name, "optimum", round(opt, 4))

# %%
cache = {}
rows = [measure_deviation_gain(inst, p, 300, 0, math.inf, 1e-3, 0.05, opt=opt, cache=cache)
        for p in canonical_menu(inst, 0)]
alpha = max(r.realized_alpha for r in rows)
for r in rows:
    print(f"{r.profile.label:<26} gain {r.gain:+.4f}  +/- {r.half_width:.4f}")

# %% [markdown]
# The guarantee is loose at this scale: its privacy term alone is
# `m (U + n)(2 eps + beta + delta)`.

# %%
print("bound", eta_game_bound(inst.m, inst.n, inst.gamma, alpha, 1.0, 0.05, 1e-3))
