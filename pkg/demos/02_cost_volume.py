"""
Cost volume and winner-take-all
===============================

Matching cost between two feature grids over every 2D displacement.
"""

import numpy as np

from dcflow import costvolume
from dcflow.costvolume import SearchRange

# random unit features; the second grid is the first shifted by (2, -1)
rng = np.random.default_rng(1)
f1 = rng.normal(size=(24, 30, 16))
f1 /= np.linalg.norm(f1, axis=-1, keepdims=True)
f2 = np.roll(f1, shift=(-1, 2), axis=(0, 1))

search = SearchRange(3)
print("labels per pixel:", search.n_labels, "first few:", search.label_vectors()[:4].tolist())

# the float volume: 1 - <f, g>, with 2 for displacements leaving the frame
cv = costvolume.build_cost_volume(f1, f2, search)
print("cost range:", cv.data.min().round(6), cv.data.max())

# the byte volume used by SGM
qcv = costvolume.build_quantized_cost_volume(f1, f2, search)
print("quantized dtype:", qcv.data.dtype, "bytes:", qcv.data.nbytes)

# WTA recovers the shift everywhere the match stays in frame
wta = costvolume.wta_flow(qcv)
inner = wta.vectors[4:-4, 4:-4]
print("WTA exact on interior:", np.all(inner == (2, -1), axis=-1).mean())
