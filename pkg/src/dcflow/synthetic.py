"""Synthetic image pairs with exact ground-truth flow."""

import numpy as np
from scipy import ndimage

from .fields import FlowField


def make_texture(shape, seed=0, kind="mosaic", regions=6, grain=2.5, contrast=None):
    """Random RGB texture in roughly [0, 1].

    ``kind="noise"`` is Gaussian-blurred color noise of std ``contrast``
    (default 0.25). ``kind="mosaic"`` lays weaker noise (default 0.03) over a
    Voronoi partition into ``regions`` flat-colored cells, so region borders
    dominate the boundary map while the grain stays matchable.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    grain_img = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), (grain, grain, 0))
    grain_img /= grain_img.std() + 1e-12
    if kind == "noise":
        return 0.5 + (0.25 if contrast is None else contrast) * grain_img
    if kind != "mosaic":
        raise ValueError(f"unknown texture kind {kind!r}")
    centers = rng.uniform(0, 1, size=(regions, 2)) * (h, w)
    colors = rng.uniform(0.1, 0.9, size=(regions, 3))
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (ys[..., None] - centers[:, 0]) ** 2 + (xs[..., None] - centers[:, 1]) ** 2
    cell = np.argmin(d2, axis=-1)
    return colors[cell] + (0.03 if contrast is None else contrast) * grain_img


def translation(tx, ty):
    return np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]])


def as_homography(transform):
    """Accept a (tx, ty) translation or a 3x3 homography."""
    t = np.asarray(transform, dtype=np.float64)
    if t.shape == (2,):
        return translation(*t)
    if t.shape == (3, 3):
        return t / t[2, 2]
    raise ValueError("transform must be a translation (tx, ty) or a 3x3 homography")


def transform_flow(H, shape):
    """Analytic flow H p - p on an (H, W) grid."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.einsum("ij,jhw->hwi", H, np.stack([xs, ys, np.ones_like(xs)]))
    return np.stack([q[..., 0] / q[..., 2] - xs, q[..., 1] / q[..., 2] - ys], axis=-1)


def make_synthetic_pair(base, transform, seed=0, noise=0.0, min_coverage=0.5):
    """Warp ``base`` by a translation or homography.

    img1 is ``base``; img2(q) samples img1 bilinearly at H^-1 q, clamping at the
    border. The returned flow holds the analytic displacement H p - p at every
    pixel of img1 and is valid where p lands inside img2. ``noise`` adds seeded
    Gaussian noise to img2.
    """
    img1 = np.asarray(base, dtype=np.float64)
    if img1.ndim == 2:
        img1 = img1[..., None]
    h, w = img1.shape[:2]
    H = as_homography(transform)
    flow = transform_flow(H, (h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + flow[..., 0], ys + flow[..., 1]
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if valid.mean() < min_coverage:
        raise ValueError(f"transform keeps only {valid.mean():.0%} of pixels in frame")

    back = transform_flow(np.linalg.inv(H), (h, w))
    coords = np.stack([ys + back[..., 1], xs + back[..., 0]])
    img2 = np.stack([ndimage.map_coordinates(img1[..., c], coords, order=1, mode="nearest")
                     for c in range(img1.shape[2])], axis=-1)
    if noise > 0:
        img2 = img2 + np.random.default_rng(seed).normal(scale=noise, size=img2.shape)
    return img1, img2, FlowField(flow, valid)


def random_homography(rng, shape, scale=0.06, shift=6.0, persp=2e-4):
    """Mild random homography about the image center (zoom, shear, shift, tilt)."""
    h, w = shape
    c = np.array([[1, 0, -w / 2], [0, 1, -h / 2], [0, 0, 1.0]])
    a = np.eye(2) + rng.uniform(-scale, scale, size=(2, 2))
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = rng.uniform(-shift, shift, size=2)
    m[2, :2] = rng.uniform(-persp, persp, size=2)
    H = np.linalg.inv(c) @ m @ c
    return H / H[2, 2]
