"""Densification of semi-dense matches.

Segments from a thresholded boundary map get planar homographies fitted by
RANSAC (fine level first, then coarse segments whose children fit well);
whatever is not covered by a valid homography is filled by an edge-aware
K-nearest-match interpolation over geodesic distances.
"""

import heapq
import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

UPSCALE = 3


@dataclass
class MatchSet:
    """Full-resolution matches: integer pixel (x, y) and flow (dx, dy)."""

    points: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.flows = np.asarray(self.flows, dtype=np.float64).reshape(-1, 2)
        if len(self.points) != len(self.flows):
            raise ValueError("points and flows differ in length")

    def __len__(self):
        return len(self.points)

    @property
    def targets(self):
        return self.points + self.flows

    def subset(self, idx):
        return MatchSet(self.points[idx], self.flows[idx])

    def pixel_index(self, shape):
        x = self.points[:, 0].astype(np.int64)
        y = self.points[:, 1].astype(np.int64)
        return y * shape[1] + x


@dataclass(frozen=True)
class PostprocessParams:
    t1: float = 0.2
    t2: float = 0.4
    min_matches: int = 30
    rho_fine: float = 0.6
    rho_coarse: float = 0.6
    rho_child: float = 0.5
    inlier_eps: float = 3.0
    ransac_iters: int = 500
    knn: int = 25
    lam: float = 100.0
    sigma: float = 10.0


def upscale_matches(semi, factor=UPSCALE):
    """Lift valid working-resolution flows to block-center full-res matches."""
    ys, xs = np.nonzero(semi.valid)
    pts = np.stack([factor * xs + factor // 2, factor * ys + factor // 2], axis=1)
    return MatchSet(pts, factor * semi.vectors[ys, xs])


# ---------------------------------------------------------------------------
# boundaries and segments
# ---------------------------------------------------------------------------


def boundary_map(img):
    """Box-smoothed Sobel magnitude of the gray image, scaled by its 99th percentile."""
    img = np.asarray(img, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    mag = np.hypot(ndimage.sobel(gray, axis=1, mode="nearest"),
                   ndimage.sobel(gray, axis=0, mode="nearest"))
    mag = ndimage.uniform_filter(mag, size=3, mode="nearest")
    scale = np.percentile(mag, 99)
    if scale <= 0:
        scale = mag.max()
    if scale <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / scale, 0.0, 1.0)


@dataclass
class SegmentHierarchy:
    fine: np.ndarray    # (H, W) int, ids 0..n_fine-1
    coarse: np.ndarray  # (H, W) int, ids 0..n_coarse-1
    parent: np.ndarray  # (n_fine,) coarse id of each fine segment

    @property
    def n_fine(self):
        return len(self.parent)

    @property
    def n_coarse(self):
        return int(self.coarse.max()) + 1


def _shift(a, dy, dx, fill):
    out = np.full_like(a, fill)
    h, w = a.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        a[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def _flood(labels, group=None):
    """Breadth-first growth of labelled pixels into -1 pixels, smaller id wins ties.

    With ``group`` a label only crosses between pixels of the same group.
    """
    labels = labels.copy()
    big = np.iinfo(labels.dtype).max
    while True:
        todo = labels < 0
        if not todo.any():
            return labels
        cand = np.full_like(labels, big)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nl = _shift(labels, dy, dx, -1)
            ok = nl >= 0
            if group is not None:
                ok &= _shift(group, dy, dx, -1) == group
            cand = np.where(ok & (nl < cand), nl, cand)
        grow = todo & (cand < big)
        if not grow.any():
            return labels
        labels[grow] = cand[grow]


def _components(mask):
    lab, n = ndimage.label(mask)
    return lab.astype(np.int64) - 1, n


def _dense_ids(labels):
    _, first = np.unique(labels.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[np.unique(labels.ravel())[order]] = np.arange(len(order))
    return remap[labels]


def segment_hierarchy(bmap, t1=0.2, t2=0.4):
    """Two nested segmentations from thresholding a boundary map at t1 < t2.

    Each level's seeds are the 4-connected components below its threshold;
    boundary pixels join the nearest seed by breadth-first flooding. Fine
    flooding never crosses a coarse segment border, which keeps every fine
    segment inside one coarse segment; a coarse segment without any fine seed
    becomes a single fine segment.
    """
    if not 0 <= t1 < t2 <= 1:
        raise ValueError("need 0 <= t1 < t2 <= 1")
    bmap = np.asarray(bmap, dtype=np.float64)

    coarse, n = _components(bmap < t2)
    coarse = _flood(coarse) if n else np.zeros(bmap.shape, np.int64)
    coarse = _dense_ids(coarse)

    fine, n = _components(bmap < t1)
    if n:
        fine = _flood(fine, group=coarse)
    orphan = fine < 0
    if orphan.any():
        fine[orphan] = fine.max() + 1 + coarse[orphan]
    fine = _dense_ids(fine)

    parent = np.zeros(fine.max() + 1, dtype=np.int64)
    parent[fine.ravel()] = coarse.ravel()
    return SegmentHierarchy(fine, coarse, parent)


# ---------------------------------------------------------------------------
# homographies
# ---------------------------------------------------------------------------


def _normalizer(pts):
    # pts (..., n, 2) -> similarity T with centroid 0 and mean distance sqrt(2)
    c = pts.mean(axis=-2)
    d = np.linalg.norm(pts - c[..., None, :], axis=-1).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0]
    T[..., 1, 2] = -s * c[..., 1]
    T[..., 2, 2] = 1.0
    return T


def _apply_T(T, pts):
    return pts @ T[..., :2, :2].swapaxes(-1, -2) + T[..., None, :2, 2]


def _dlt(src, dst):
    """Normalized DLT for batches: src, dst (..., n, 2) -> H (..., 3, 3)."""
    Ts, Td = _normalizer(src), _normalizer(dst)
    s, d = _apply_T(Ts, src), _apply_T(Td, dst)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    # the zero row keeps a 9x9 V even for minimal 4-point samples
    pad = np.zeros(r1.shape[:-2] + (1, 9))
    A = np.concatenate([r1, r2, pad], axis=-2)
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    Hn = vt[..., -1, :].reshape(vt.shape[:-2] + (3, 3))
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H


def normalize_homography(H):
    H = np.asarray(H, dtype=np.float64)
    if abs(H[2, 2]) > 1e-12:
        return H / H[2, 2]
    return H / np.linalg.norm(H)


def _project(H, pts):
    # H (..., 3, 3), pts (n, 2) -> (..., n, 2), w (..., n)
    q = pts @ H[..., :2, :2].swapaxes(-1, -2) + H[..., None, :2, 2]
    w = pts @ H[..., 2, :2][..., :, None]
    w = w[..., 0] + H[..., 2, 2][..., None]
    return q, w


def _transfer_error(H, src, dst):
    q, w = _project(H, src)
    bad = np.abs(w) <= 1e-9
    w = np.where(bad, 1.0, w)
    err = np.linalg.norm(q / w[..., None] - dst, axis=-1)
    return np.where(bad, np.inf, err)


def _degenerate(sample, tol=1e-6):
    # any collinear triple among 4 points (..., 4, 2)
    bad = np.zeros(sample.shape[:-2], dtype=bool)
    scale = np.ptp(sample, axis=-2).max(axis=-1) ** 2 + 1e-12
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a = sample[..., j, :] - sample[..., i, :]
        b = sample[..., k, :] - sample[..., i, :]
        area = np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
        bad |= area <= tol * scale
    return bad


def fit_homography_ransac(matches, iters=500, inlier_eps=3.0, rng_seed=0, refine_rounds=5,
                          chunk=128):
    """Robust homography from p -> p + v matches.

    Returns ``(H, inlier_count)`` with H[2, 2] = 1, or None when fewer than
    four matches exist, every sample is degenerate, or the best consensus has
    under four inliers.
    """
    n = len(matches)
    if n < 4:
        return None
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    src, dst = matches.points, matches.targets
    idx = np.stack([rng.choice(n, 4, replace=False) for _ in range(iters)])
    ok = ~(_degenerate(src[idx]) | _degenerate(dst[idx]))
    idx = idx[ok]
    if len(idx) == 0:
        return None

    best_count, best_H = -1, None
    for c0 in range(0, len(idx), chunk):
        sel = idx[c0:c0 + chunk]
        Hs = _dlt(src[sel], dst[sel])
        counts = (_transfer_error(Hs, src, dst) <= inlier_eps).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_H = int(counts[k]), Hs[k]
    if best_count < 4:
        return None

    inliers = _transfer_error(best_H, src, dst) <= inlier_eps
    H = best_H
    for _ in range(refine_rounds):
        H_new = _dlt(src[inliers], dst[inliers])
        new_in = _transfer_error(H_new, src, dst) <= inlier_eps
        if new_in.sum() < inliers.sum():
            break
        same = np.array_equal(new_in, inliers)
        H, inliers = H_new, new_in
        if same:
            break
    H = normalize_homography(H)
    if not np.isfinite(H).all() or abs(np.linalg.det(H)) < 1e-9:
        return None
    return H, int(inliers.sum())


def apply_homography(H, p):
    """Flow induced by H at pixel(s) p: project(H [x, y, 1]) - (x, y)."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    q, w = _project(np.asarray(H, dtype=np.float64), pts)
    if np.any(np.abs(w) <= 1e-9):
        raise ValueError("point at infinity")
    flow = q / w[:, None] - pts
    return flow[0] if single else flow


def _groups(labels, n):
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n)]


def _segment_flow(H, pix, width, max_flow):
    ys, xs = np.divmod(pix, width)
    try:
        flow = apply_homography(H, np.stack([xs, ys], axis=1).astype(np.float64))
    except ValueError:
        return None
    if not np.isfinite(flow).all() or np.abs(flow).max(initial=0) > max_flow:
        return None
    return flow


def homography_inpaint(hier, matches, params=None, rng_seed=0):
    """Fill segments explained by a homography; returns (flow, covered).

    Fine segments with at least ``min_matches`` matches are fitted and kept
    when their inlier fraction reaches ``rho_fine``. A coarse segment is
    refitted on all of its matches when its children's inliers make up at
    least ``rho_child`` of them, and a valid coarse fit overrides the fills
    of its children. RANSAC seeds derive from (rng_seed, level, segment id).
    """
    params = params or PostprocessParams()
    shape = hier.fine.shape
    h, w = shape
    max_flow = 2.0 * max(h, w)
    flow = np.zeros(shape + (2,))
    covered = np.zeros(shape, dtype=bool)
    if len(matches) == 0:
        return flow, covered
    mpix = matches.pixel_index(shape)
    flat_flow = flow.reshape(-1, 2)
    flat_cov = covered.reshape(-1)

    fine_lab = hier.fine.ravel()
    fine_inliers = np.zeros(hier.n_fine, dtype=np.int64)
    m_by_fine = _groups(fine_lab[mpix], hier.n_fine)
    px_by_fine = _groups(fine_lab, hier.n_fine)
    for sid in range(hier.n_fine):
        sel = m_by_fine[sid]
        if len(sel) < max(params.min_matches, 4):
            continue
        seed = np.random.SeedSequence([rng_seed, 0, sid])
        fit = fit_homography_ransac(matches.subset(sel), params.ransac_iters,
                                    params.inlier_eps, np.random.default_rng(seed))
        if fit is None:
            continue
        H, count = fit
        fine_inliers[sid] = count
        if count / len(sel) >= params.rho_fine:
            seg = _segment_flow(H, px_by_fine[sid], w, max_flow)
            if seg is not None:
                flat_flow[px_by_fine[sid]] = seg
                flat_cov[px_by_fine[sid]] = True

    coarse_lab = hier.coarse.ravel()
    n_coarse = hier.n_coarse
    m_by_coarse = _groups(coarse_lab[mpix], n_coarse)
    px_by_coarse = _groups(coarse_lab, n_coarse)
    child_inliers = np.bincount(hier.parent, weights=fine_inliers, minlength=n_coarse)
    for cid in range(n_coarse):
        sel = m_by_coarse[cid]
        if len(sel) < max(params.min_matches, 4):
            continue
        if child_inliers[cid] / len(sel) < params.rho_child:
            continue
        seed = np.random.SeedSequence([rng_seed, 1, cid])
        fit = fit_homography_ransac(matches.subset(sel), params.ransac_iters,
                                    params.inlier_eps, np.random.default_rng(seed))
        if fit is None:
            continue
        H, count = fit
        if count / len(sel) >= params.rho_coarse:
            seg = _segment_flow(H, px_by_coarse[cid], w, max_flow)
            if seg is not None:
                flat_flow[px_by_coarse[cid]] = seg
                flat_cov[px_by_coarse[cid]] = True
    return flow, covered


# ---------------------------------------------------------------------------
# edge-aware interpolation
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _knn_geodesic(h, w, wx, wy, seeds, k):
    # Dijkstra where each pixel settles up to k distinct seeds. If seed s is
    # among the k nearest of p, it is among the k nearest of every pixel on
    # its shortest path to p, so pruning at k per pixel stays exact.
    n = h * w
    dist = np.full((n, k), np.inf)
    src = np.full((n, k), -1, np.int64)
    cnt = np.zeros(n, np.int64)
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    for s in range(seeds.shape[0]):
        heap.append((0.0, seeds[s], np.int64(s)))
    heapq.heapify(heap)
    while len(heap) > 0:
        d, p, s = heapq.heappop(heap)
        c = cnt[p]
        if c >= k:
            continue
        dup = False
        for j in range(c):
            if src[p, j] == s:
                dup = True
                break
        if dup:
            continue
        dist[p, c] = d
        src[p, c] = s
        cnt[p] = c + 1
        y = p // w
        x = p - y * w
        if x + 1 < w and cnt[p + 1] < k:
            heapq.heappush(heap, (d + wx[y, x], p + 1, s))
        if x > 0 and cnt[p - 1] < k:
            heapq.heappush(heap, (d + wx[y, x - 1], p - 1, s))
        if y + 1 < h and cnt[p + w] < k:
            heapq.heappush(heap, (d + wy[y, x], p + w, s))
        if y > 0 and cnt[p - w] < k:
            heapq.heappush(heap, (d + wy[y - 1, x], p - w, s))
    return dist, src


def knn_geodesic(bmap, seed_pixels, k=25, lam=100.0):
    """Distances and indices of the k geodesically nearest seeds of every pixel.

    Grid edges cost 1 + lam * mean boundary strength of their two endpoints.
    Returns (dist, src) of shape (H*W, k), sorted by distance, with inf / -1
    where fewer than k seeds are reachable.
    """
    b = np.asarray(bmap, dtype=np.float64)
    h, w = b.shape
    wx = 1.0 + lam * 0.5 * (b[:, :-1] + b[:, 1:])
    wy = 1.0 + lam * 0.5 * (b[:-1, :] + b[1:, :])
    seeds = np.asarray(seed_pixels, dtype=np.int64)
    return _knn_geodesic(h, w, np.ascontiguousarray(wx), np.ascontiguousarray(wy), seeds, k)


def epic_interpolate(matches, bmap, mask=None, knn=25, lam=100.0, sigma=10.0):
    """Edge-aware weighted average of the K geodesically nearest match flows.

    Weights are exp(-dist / sigma). Returns an (H, W, 2) array filled on
    ``mask`` (every pixel when None) and zero elsewhere.
    """
    if len(matches) == 0:
        raise ValueError("interpolation needs at least one match")
    shape = np.shape(bmap)
    mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.zeros(shape + (2,))
    if not mask.any():
        return out
    dist, src = knn_geodesic(bmap, matches.pixel_index(shape), knn, lam)
    sel = np.flatnonzero(mask.ravel())
    d, s = dist[sel], src[sel]
    found = s >= 0
    dmin = np.where(found, d, np.inf).min(axis=1, keepdims=True)
    wts = np.where(found, np.exp(-(np.where(found, d, 0.0) - dmin) / sigma), 0.0)
    flows = matches.flows[np.where(found, s, 0)]
    total = wts.sum(axis=1)
    # average offsets from the nearest match so a constant field comes back exactly
    ref = flows[:, 0]
    vals = ref + np.einsum("nk,nkc->nc", wts, flows - ref[:, None]) / \
        np.where(total > 0, total, 1.0)[:, None]
    out.reshape(-1, 2)[sel] = vals
    return out
