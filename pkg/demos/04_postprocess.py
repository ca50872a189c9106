"""
From sparse matches to dense flow
=================================

Fit a homography with RANSAC, then fill a dense field by edge-aware
interpolation.
"""

import numpy as np

from dcflow import postprocess, synthetic
from dcflow.postprocess import MatchSet, PostprocessParams

rng = np.random.default_rng(3)
H = np.array([[1.02, 0.01, 3.0], [-0.01, 0.99, -2.0], [1e-4, 0.0, 1.0]])

# 70 matches consistent with H and 30 junk ones
pts = rng.uniform(0, 100, (100, 2))
flows = postprocess.apply_homography(H, pts)
flows[70:] = rng.uniform(-20, 20, (30, 2))
H_est, inliers = postprocess.fit_homography_ransac(MatchSet(pts, flows), rng_seed=0)
print("inliers:", inliers)
print("max transfer error on the good matches:",
      np.abs(postprocess.apply_homography(H_est, pts[:70]) - flows[:70]).max())

# dense interpolation of a sparse set of matches on a real texture
img = synthetic.make_texture((60, 80), seed=4)
bmap = postprocess.boundary_map(img)
ys, xs = np.mgrid[2:60:6, 2:80:6]
sparse = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
matches = MatchSet(sparse, postprocess.apply_homography(H, sparse))
opts = PostprocessParams()
dense = postprocess.epic_interpolate(matches, bmap, knn=opts.knn, lam=opts.lam, sigma=opts.sigma)
gy, gx = np.mgrid[0:60, 0:80]
gt = postprocess.apply_homography(H, np.stack([gx.ravel(), gy.ravel()], 1).astype(float))
print("dense AEPE from", len(sparse), "matches:",
      np.linalg.norm(dense.reshape(-1, 2) - gt, axis=1).mean().round(3))
