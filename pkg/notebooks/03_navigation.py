# %% [markdown]
# # Navigating with the spline representation
# A 2D kinematic simulator: each step rotates the tip heading by up to 15
# degrees and advances or retracts the wire by up to 0.01 units, with the tip
# sliding along vessel walls. A scripted expert follows the route
# centerline. We clone it from demonstrations whose inputs are spline
# parameters. For speed this script uses the true wire's spline; the
# `demos`, `bctrain` and `navigate` commands do the same with a trained
# model's predictions.
#
# Run: `python notebooks/03_navigation.py`

# %%
import numpy as np

from splineformer import navsim as ns
from splineformer import synthdata as sd

env = ns.NavEnv(sd.gen_vessel_map(0))

# %% [markdown]
# ## Baselines

# %%
for target in ("bca", "lcca"):
    print(target, "expert:", ns.evaluate(ns.ExpertPolicy(), None, env, target, n_trials=20))
print("bca random:", ns.evaluate(ns.RandomPolicy(0), None, env, "bca", n_trials=20))

# %% [markdown]
# ## Behavior cloning
# Demonstrations execute the expert's action plus Gaussian noise but record
# the clean label, so the learner also sees how to recover from drift.

# %%
demos = [ns.collect_demos(env, t, 20, seed=0, action_noise=0.5) for t in ("bca", "lcca")]
features = np.concatenate([d["wire_features"] for d in demos])
onehots = np.concatenate([d["targets"] for d in demos])
actions = np.concatenate([d["actions"] for d in demos])
history = []
policy = ns.bc_train(features, onehots, actions, seed=0, epochs=100, history=history)
print(f"{len(actions)} steps; loss {history[0]:.3f} -> {history[-1]:.3f}")


class OracleFeatures:
    needs_features = False

    def __call__(self, env_, state, features=None):
        return ns.bc_act(policy, ns.wire_features(state), state.target)


for target in ("bca", "lcca"):
    print(target, "cloned:", ns.evaluate(OracleFeatures(), None, env, target, n_trials=20))

# %% [markdown]
# With a toy model's predictions in place of the true wire, the cloned policy
# succeeds far less often (10 to 40% on BCA over 20 trials). The model places
# the tip within a few pixels, but the direction of its first control segment
# is off by tens of degrees, and the expert's steering depends on that heading.
