"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package internals it checks; each function is the
most literal loop-level version of the quantity.
"""

import itertools

import numpy as np


# --- embedding network -------------------------------------------------------

def conv_valid_loops(x, w, b):
    """Valid 3x3 cross-correlation of one (H, W, Cin) map, written as loops."""
    h, wd, _ = x.shape
    cout = w.shape[0]
    out = np.zeros((h - 2, wd - 2, cout))
    for i in range(h - 2):
        for j in range(wd - 2):
            win = x[i:i + 3, j:j + 3, :]  # (3, 3, Cin)
            for o in range(cout):
                out[i, j, o] = np.sum(win * w[o].transpose(1, 2, 0)) + b[o]
    return out


def embed_patch_loops(patch, weights, biases):
    h = np.asarray(patch, dtype=np.float64)
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = conv_valid_loops(h, w, b)
        if k < len(weights) - 1:
            h = np.maximum(h, 0.0)
    v = h[0, 0]
    return v / np.linalg.norm(v)


def embed_batch(patches, weights, biases, masks=None):
    """Batched forward via sliding windows; returns (features, relu masks).

    With ``masks`` the ReLUs use the given on/off pattern instead of the sign
    of their input, i.e. the network restricted to one linear region.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    h = np.asarray(patches, dtype=np.float64)
    used = []
    for k, (w, b) in enumerate(zip(weights, biases)):
        win = sliding_window_view(h, (3, 3), axis=(1, 2))  # (B, H-2, W-2, Cin, 3, 3)
        h = np.tensordot(win, w, axes=([3, 4, 5], [1, 2, 3])) + b
        if k < len(weights) - 1:
            m = h > 0 if masks is None else masks[k]
            used.append(m)
            h = np.where(m, h, 0.0)
    v = h[:, 0, 0, :]
    return v / np.linalg.norm(v, axis=1, keepdims=True), used


def triplet_loss_reference(fa, fp, fn, margin):
    terms = [max(0.0, margin + np.sum((a - p) ** 2) - np.sum((a - n) ** 2))
             for a, p, n in zip(fa, fp, fn)]
    return sum(terms) / len(terms)


# --- cost volume ---------------------------------------------------------------

def cost_volume_loops(f1, f2, r, sentinel=2.0):
    """0.5 * ||F1_p - F2_{p+v}||^2 per entry, labels vy-outer, vx-inner."""
    h, w, _ = f1.shape
    side = 2 * r + 1
    out = np.full((h, w, side * side), sentinel)
    for y in range(h):
        for x in range(w):
            for vy in range(-r, r + 1):
                for vx in range(-r, r + 1):
                    ty, tx = y + vy, x + vx
                    if 0 <= ty < h and 0 <= tx < w:
                        diff = f1[y, x] - f2[ty, tx]
                        out[y, x, (vy + r) * side + (vx + r)] = 0.5 * float(diff @ diff)
    return out


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --- SGM -----------------------------------------------------------------------

def label_l1(a, b, side):
    ay, ax = divmod(a, side)
    by, bx = divmod(b, side)
    return abs(ay - by) + abs(ax - bx)


def pair_cost(a, b, side, p1, p2):
    j = label_l1(a, b, side)
    return 0 if j == 0 else (p1 if j == 1 else p2)


def chain_energy(labels, cost, pens, p1, side, capped=False):
    """Unary plus pairwise along a chain, each neighbouring pair counted once.

    With ``capped`` a unit jump costs min(P1, P2) as in the scanline
    recursion, which matters only when the edge-aware P2 drops below P1.
    """
    e = sum(int(cost[i, l]) for i, l in enumerate(labels))
    for i in range(1, len(labels)):
        q1 = min(p1, pens[i - 1]) if capped else p1
        e += pair_cost(labels[i - 1], labels[i], side, q1, pens[i - 1])
    return e


def chain_min_bruteforce(cost, pens, p1, side, capped=False):
    n, nl = cost.shape
    return min(chain_energy(ls, cost, pens, p1, side, capped)
               for ls in itertools.product(range(nl), repeat=n))


def path_pass_literal(cost, pens, p1, side):
    """Scanline recursion with the normalizer min_i(L(p-r, i) + P2(p, p-r)), in Python ints."""
    n, nl = cost.shape
    out = np.zeros((n, nl), dtype=np.int64)
    out[0] = cost[0]
    for i in range(1, n):
        prev = [int(v) for v in out[i - 1]]
        p2 = int(pens[i - 1])
        m = min(prev)
        for v in range(nl):
            nbrs = [prev[u] for u in range(nl) if label_l1(u, v, side) == 1]
            s = min([prev[v]] + [q + p1 for q in nbrs] + [m + p2])
            out[i, v] = int(cost[i, v]) + s - (m + p2)
    return out


def grid_energy(labels, cost, pen_h, pen_v, p1, side):
    """Double-counted 4-neighbour energy of a (H, W) label grid."""
    h, w = labels.shape
    e = sum(int(cost[y, x, labels[y, x]]) for y in range(h) for x in range(w))
    for y in range(h):
        for x in range(w - 1):
            e += 2 * pair_cost(labels[y, x], labels[y, x + 1], side, p1, pen_h[y, x])
    for y in range(h - 1):
        for x in range(w):
            e += 2 * pair_cost(labels[y, x], labels[y + 1, x], side, p1, pen_v[y, x])
    return e


def grid_min_bruteforce(cost, pen_h, pen_v, p1, side):
    """Exact minimum over every labeling, vectorized over label tuples."""
    h, w, nl = cost.shape
    n = h * w
    grid = np.stack(np.meshgrid(*[np.arange(nl)] * n, indexing="ij"), -1).reshape(-1, n)
    flat_cost = cost.reshape(n, nl)
    e = flat_cost[np.arange(n), grid].sum(axis=1).astype(np.int64)
    ly, lx = np.divmod(grid, side)

    def pairs(i, j, p2):
        jump = np.abs(ly[:, i] - ly[:, j]) + np.abs(lx[:, i] - lx[:, j])
        return np.where(jump == 0, 0, np.where(jump == 1, p1, p2))

    for y in range(h):
        for x in range(w):
            i = y * w + x
            if x + 1 < w:
                e += 2 * pairs(i, i + 1, pen_h[y, x])
            if y + 1 < h:
                e += 2 * pairs(i, i + w, pen_v[y, x])
    k = int(np.argmin(e))
    return int(e[k]), grid[k].reshape(h, w)


# --- homographies --------------------------------------------------------------

def project(H, pts):
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(H).T
    return q[:, :2] / q[:, 2:]


# --- geodesic distances --------------------------------------------------------

def geodesic_dijkstra(bmap, seeds, lam):
    """Multi-source shortest paths on the 4-grid via scipy's csgraph."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    h, w = bmap.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for a, b, ba, bb in ((idx[:, :-1], idx[:, 1:], bmap[:, :-1], bmap[:, 1:]),
                         (idx[:-1, :], idx[1:, :], bmap[:-1, :], bmap[1:, :])):
        wgt = 1.0 + lam * 0.5 * (ba + bb)
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        vals += [wgt.ravel(), wgt.ravel()]
    g = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(h * w, h * w)).tocsr()
    return dijkstra(g, indices=np.asarray(seeds))  # (n_seeds, H*W)
