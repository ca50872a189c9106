"""
Learning a patch embedding
==========================

Train a small embedding network on synthetic translations and watch the
triplet loss go down on held-out patches.
"""

import numpy as np

from dcflow import embedder, pipeline, synthetic

# training pairs: random mosaic textures under integer shifts, taken to working resolution
rng = np.random.default_rng(0)
pairs = []
for k in range(6):
    base = synthetic.make_texture((96, 96), seed=k)
    shift = rng.integers(-4, 5, size=2) * 3
    pairs.append(pipeline.prepare_training_pair(*synthetic.make_synthetic_pair(base, shift)))

# held-out triplets: one anchor patch, its true match, and a nearby wrong match
held_out = embedder.sample_triplets(*pairs[0], count=200, rng_seed=99)
init = embedder.init_params(d=16)
print("initial held-out loss:", embedder.triplet_loss(held_out, init))

# a short single-stage schedule keeps this under a minute
schedule = embedder.TrainSchedule(stages=[(200, 0.1)], batch_size=60)
params = embedder.train(pairs[1:], schedule, d=16, log_every=50)
print("trained held-out loss:", embedder.triplet_loss(held_out, params))

# every pixel gets a unit-length feature vector
feats = embedder.forward_embed(pairs[0][0], params)
print("feature grid", feats.shape, "norms in", np.linalg.norm(feats, axis=-1).min().round(6),
      "..", np.linalg.norm(feats, axis=-1).max().round(6))

embedder.save_params("demo_model.dcfe", params)
print("saved demo_model.dcfe with", params.n_params, "parameters")
