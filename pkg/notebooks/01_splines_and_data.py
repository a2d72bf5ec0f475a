# %% [markdown]
# # Splines and synthetic fluoroscopy
# A guidewire is a smooth open curve, so we describe it by a clamped cubic
# B-spline: a handful of control points plus a knot vector. This script fits
# one to a noisy polyline, checks the basic basis properties, then builds the
# synthetic vessel map and renders a few frames.
#
# Run: `python notebooks/01_splines_and_data.py [out_dir]`

# %%
import sys
from pathlib import Path

import numpy as np

from splineformer import bspline as bs
from splineformer import synthdata as sd

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# %% [markdown]
# ## Fitting a polyline
# Chord-length parameters, averaged knots, then a least-squares solve.

# %%
t = np.linspace(0, 1, 120)
poly = np.column_stack([0.2 + 0.6 * t, 0.5 + 0.2 * np.sin(3 * t)]) + rng.normal(0, 0.002, (120, 2))
curve = bs.fit_spline(poly, n_ctrl=8)
print("control points:", curve.n_ctrl, "knots:", np.round(curve.knots, 3))
dense = bs.sample_uniform(curve, 4000)
print("max distance from a polyline point to the curve:", sd.point_segment_distance(poly, dense).max().round(4))
# the noisy polyline zig-zags, so it is longer than the smooth curve
print("arc length:", round(bs.arc_length(curve), 4), "polyline length:", round(bs.polyline_length(poly), 4))

# %% [markdown]
# The basis functions are non-negative and sum to one anywhere in the domain.

# %%
A = bs.basis_matrix(3, np.linspace(0, 0.999, 50), curve.knots)
print("min basis value:", A.min(), " max |sum - 1|:", np.abs(A.sum(axis=1) - 1).max())

# %% [markdown]
# ## The vessel map and a rendered frame
# One trunk with two branches. A wire is inserted to some depth, possibly
# into a branch, and rendered as a dark anti-aliased line over a noisy
# background.

# %%
vmap = sd.gen_vessel_map(0)
for branch in ("none", "bca", "lcca"):
    truth = sd.gen_guidewire(vmap, 0.7, branch, seed=1, angled_tip=True)
    wire = bs.sample_equal_chord(truth, 200)
    image = sd.render(vmap, wire, 128, 128, contrast=0.6, seed=1)
    sd.write_pgm(out / f"frame_{branch}.pgm", image)
    print(f"{branch:5s}: {truth.n_ctrl} control points, tip at {np.round(truth.control_points[0], 3)}")

# %% [markdown]
# ## A small dataset
# Samples come in blocks of ten sharing a stratum (branch, length, contrast,
# tip shape); eight go to train, one to validation, one to test.

# %%
entries = sd.make_dataset(out / "data", sd.SynthConfig(n=40, seed=0))
for split in ("train", "val", "test"):
    print(split, sum(e["split"] == split for e in entries))
print("manifest hash:", sd.manifest_hash(out / "data")[:16])
