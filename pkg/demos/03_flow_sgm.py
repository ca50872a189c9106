"""
Semi-global matching over 2D labels
===================================

A noisy cost volume with an ambiguous patch: WTA guesses inside the
patch, SGM fills it from the surroundings.
"""

import numpy as np

from dcflow import costvolume, flowsgm
from dcflow.costvolume import QuantizedCostVolume, SearchRange
from dcflow.flowsgm import SgmParams

rng = np.random.default_rng(2)
h, w, search = 20, 20, SearchRange(2)
truth = search.label_index(1, 0)

# low cost at the true label, random elsewhere, and a flat region in the middle
data = rng.integers(60, 200, (h, w, search.n_labels)).astype(np.uint8)
data[..., truth] = 20
data[7:13, 7:13] = 100
qcv = QuantizedCostVolume(data, search)
img = np.zeros((h, w, 3))

wta = costvolume.wta_flow(qcv)
_, sgm = flowsgm.flow_sgm(qcv, img, SgmParams())
print("WTA correct:", np.all(wta.vectors == (1, 0), axis=-1).mean())
print("SGM correct:", np.all(sgm.vectors == (1, 0), axis=-1).mean())

# the regularized energy is lower for the SGM labeling
params = SgmParams()
print("energy WTA:", flowsgm.flow_energy(wta, qcv, img, params))
print("energy SGM:", flowsgm.flow_energy(sgm, qcv, img, params))

# with zero penalties SGM is just WTA
_, same = flowsgm.flow_sgm(qcv, img, SgmParams(P1=0, P2=0))
print("zero penalties equal WTA:", np.array_equal(same.vectors, wta.vectors))
