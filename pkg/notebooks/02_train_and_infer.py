# %% [markdown]
# # Training the sequence model
# The model reads a frame and emits the wire as tokens: token 0 is the tip,
# each later token is a control point with its knot and an end-of-sequence
# probability. Here we overfit eight frames to watch the loss terms fall,
# then decode and draw the attention map.
#
# Run: `python notebooks/02_train_and_infer.py [out_dir] [steps]`
# (2000 steps take roughly five minutes on one core; the default is 300.)

# %%
import sys
from pathlib import Path

import numpy as np

from splineformer import synthdata as sd
from splineformer.model import SplineFormer, to_spline
from splineformer.training import Trainer, TrainConfig, curve_distance, targets_from_curves, tip_error
from splineformer.transformer import PRESETS

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300
out.mkdir(exist_ok=True)

# %%
vmap = sd.gen_vessel_map(0)
config = sd.SynthConfig(n=10, seed=0)
samples = [sd.make_sample(vmap, i, config) for i in range(8)]
images = np.stack([s.image for s in samples]).astype(np.float32)
curves = [s.truth for s in samples]
model = SplineFormer(PRESETS["toy"], seed=0, dtype=np.float32)
print(f"{model.n_parameters} parameters; target lengths", [c.n_ctrl for c in curves])

# %% [markdown]
# Full-batch Adam on the composite loss: token regression, end-of-sequence
# cross-entropy and a curve term comparing sampled points of both splines.

# %%
targets = targets_from_curves(curves, model.config.max_seq_len)
trainer = Trainer(model, TrainConfig(lr=1e-4, batch_size=8), log_path=out / "overfit_log.csv")
for step in range(steps):
    r = trainer.train_step(images, targets)
    if step % 50 == 0 or step == steps - 1:
        print(f"step {step:4d} total {r.total:.4f} mse {r.mse_term:.4f} bce {r.bce_term:.4f} "
              f"curve {r.curvature_term:.5f}")
print("loss ratio:", round(trainer.history[0].total / min(h.total for h in trainer.history), 1))

# %% [markdown]
# ## Decoding
# Greedy decoding stops at the first token whose end probability passes 0.5.

# %%
seqs = model.generate(images)
for s, c in zip(seqs, curves):
    print(f"len {len(s):2d}/{c.n_ctrl:2d}  tip error {tip_error(s, c) * 64:.2f} px  "
          f"curve distance {curve_distance(s, c) * 64:.2f} px  eos {s.terminated}")

# %% [markdown]
# ## Attention
# Last encoder layer, heads fused by elementwise maximum, weakest half dropped.

# %%
heat = model.attention_map(images[0], discard=0.5)
sd.write_pgm(out / "attention.pgm", heat)
sd.write_pgm(out / "frame0.pgm", images[0])
if len(seqs[0]) >= 4:
    print("first prediction as a spline:", to_spline(seqs[0]).n_ctrl, "control points")
