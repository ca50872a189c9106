"""Semi-global matching over 2D displacement labels.

Each cardinal pass runs the scanline recursion

    L_r(p, v) = C(p, v) + min(L_r(p-r, v),
                              min_{|u-v|_1 = 1} L_r(p-r, u) + P1,
                              min_i L_r(p-r, i) + P2(p, p-r))
                - min_i L_r(p-r, i)

in integer arithmetic, vectorized over all scanlines and labels at once.
The label neighborhood is the 4-neighborhood in the (vy, vx) label grid,
clipped at the range boundary.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costvolume import SearchRange
from .fields import FlowField

DIRECTIONS = ("+x", "-x", "+y", "-y")
U16_MAX = 65535
Q_MAX = 255
_BIG = 1 << 28

DUMP_MAGIC = b"DCFV"


def _iround(x):
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SgmParams:
    P1: float = 6.0
    P2: float = 64.0
    Q: float = 4.0
    T: float = 0.3
    directions: tuple = DIRECTIONS
    consistency_tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple(self.directions))
        if self.P1 < 0 or self.P2 < 0:
            raise ValueError("P1 and P2 must be non-negative")
        if self.P2 < self.P1:
            raise ValueError("P2 must be >= P1")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if self.T < 0 or self.consistency_tau < 0:
            raise ValueError("T and consistency_tau must be non-negative")
        if not self.directions:
            raise ValueError("at least one path direction is required")
        bad = set(self.directions) - set(DIRECTIONS)
        if bad or len(set(self.directions)) != len(self.directions):
            raise ValueError(f"directions must be distinct members of {DIRECTIONS}")

    @property
    def p1(self):
        return _iround(self.P1)

    @property
    def p2(self):
        return _iround(self.P2)

    @property
    def p2q(self):
        return _iround(self.P2 / self.Q)

    @classmethod
    def max_p2(cls, n_directions):
        """Largest integer P2 keeping n_directions * (255 + P2) within 16 bits."""
        return U16_MAX // n_directions - Q_MAX

    def check_bound(self):
        """Raise if the summed filtered volume could overflow 16 bits."""
        if len(self.directions) * (Q_MAX + self.p2) > U16_MAX:
            raise ValueError(
                f"P2={self.P2} with {len(self.directions)} directions can overflow the "
                f"16-bit filtered volume (max P2 is {self.max_p2(len(self.directions))})")


@dataclass
class FilteredVolume:
    data: np.ndarray  # (H, W, n_labels) uint16
    search: SearchRange

    @property
    def shape(self):
        return self.data.shape[:2]


def p2_weight(img, p, q, params):
    """Edge-aware second penalty between 4-adjacent pixels p, q = (x, y)."""
    (px, py), (qx, qy) = p, q
    if abs(px - qx) + abs(py - qy) != 1:
        raise ValueError(f"pixels {p} and {q} are not 4-adjacent")
    dist = np.linalg.norm(np.asarray(img[py, px], float) - np.asarray(img[qy, qx], float))
    return params.P2 / params.Q if dist >= params.T else params.P2


def _edge_penalties(img, params, axis):
    """Integer P2(p, p-r) for neighbours along ``axis`` (shape shrinks by 1 there)."""
    img = np.asarray(img, dtype=np.float64)
    diff = np.diff(img, axis=axis)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return np.where(dist >= params.T, params.p2q, params.p2).astype(np.int64)


def _to_scan(arr, direction):
    # reorient so the path runs along axis 1 in increasing index order
    if direction in ("+y", "-y"):
        arr = arr.swapaxes(0, 1)
    if direction in ("-x", "-y"):
        arr = arr[:, ::-1]
    return arr


def _from_scan(arr, direction):
    if direction in ("-x", "-y"):
        arr = arr[:, ::-1]
    if direction in ("+y", "-y"):
        arr = arr.swapaxes(0, 1)
    return arr


def _label_neighbor_min(prev, side):
    # prev: (R, n_labels) -> min over the L1 label neighbours, _BIG where none
    g = prev.reshape(prev.shape[0], side, side)
    nb = np.full_like(g, _BIG)
    np.minimum(nb[:, 1:, :], g[:, :-1, :], out=nb[:, 1:, :])
    np.minimum(nb[:, :-1, :], g[:, 1:, :], out=nb[:, :-1, :])
    np.minimum(nb[:, :, 1:], g[:, :, :-1], out=nb[:, :, 1:])
    np.minimum(nb[:, :, :-1], g[:, :, 1:], out=nb[:, :, :-1])
    return nb.reshape(prev.shape)


def _scan(cost, pen, p1, side):
    """Recursion along axis 1 of cost (R, N, L); pen (R, N-1) for steps 1..N-1."""
    out = np.empty(cost.shape, dtype=np.int64)
    out[:, 0] = cost[:, 0]
    prev = out[:, 0]
    for i in range(1, cost.shape[1]):
        m = prev.min(axis=1)
        s = np.minimum(prev, _label_neighbor_min(prev, side) + p1)
        s = np.minimum(s, (m + pen[:, i - 1])[:, None])
        prev = cost[:, i] + s - m[:, None]
        out[:, i] = prev
    return out


def sgm_path_pass(qcv, img, direction, params):
    """Aggregated cost L_r of one cardinal pass, as a uint16 (H, W, L) array.

    The subtracted normalizer is min_i L_r(p-r, i). The form that also
    subtracts P2(p, p-r) differs by a per-pixel constant and would go
    negative; argmins and path optima are identical.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    params.check_bound()
    axis = 0 if direction in ("+y", "-y") else 1
    pen = _edge_penalties(img, params, axis)
    if pen.shape != tuple(np.subtract(qcv.shape, (axis == 0, axis == 1))):
        raise ValueError("image and cost volume sizes differ")
    cost = _to_scan(qcv.data, direction).astype(np.int64)
    pen_scan = _to_scan(pen, direction)
    lr = _scan(cost, pen_scan, params.p1, qcv.search.side)
    bound = Q_MAX + params.p2
    top = int(lr.max(initial=0))
    if top > bound or lr.min(initial=0) < 0:
        raise AssertionError(f"path cost {top} outside [0, {bound}]")
    return np.ascontiguousarray(_from_scan(lr, direction)).astype(np.uint16)


def backtrack_scanline(lr, img, direction, params, index=0):
    """Optimal label sequence of one scanline, read back from a pass volume.

    ``index`` is the row (horizontal passes) or column (vertical passes).
    Returns label indices in image order along the scanline. Transitions are
    charged exactly as the recursion does, so a unit jump costs
    min(P1, P2(p, p-r)) when the edge-aware P2 falls below P1.
    """
    axis = 0 if direction in ("+y", "-y") else 1
    pen = _to_scan(_edge_penalties(img, params, axis), direction)[index]
    line = _to_scan(np.asarray(lr, dtype=np.int64), direction)[index]
    side = int(round(np.sqrt(line.shape[1])))
    vy, vx = np.divmod(np.arange(line.shape[1]), side)
    n = line.shape[0]
    labels = np.empty(n, dtype=np.int64)
    labels[-1] = int(np.argmin(line[-1]))
    for i in range(n - 1, 0, -1):
        v = labels[i]
        jump = np.abs(vy - vy[v]) + np.abs(vx - vx[v])
        step = np.where(jump == 0, 0, np.where(jump == 1, min(params.p1, pen[i - 1]), pen[i - 1]))
        labels[i - 1] = int(np.argmin(line[i - 1] + step))
    return labels[::-1] if direction in ("-x", "-y") else labels


def flow_sgm(qcv, img, params, threads=1):
    """Sum the enabled passes into a 16-bit filtered volume and take argmins."""
    params.check_bound()
    if threads > 1 and len(params.directions) > 1:
        with ThreadPoolExecutor(min(threads, len(params.directions))) as ex:
            passes = list(ex.map(lambda d: sgm_path_pass(qcv, img, d, params), params.directions))
    else:
        passes = [sgm_path_pass(qcv, img, d, params) for d in params.directions]
    total = np.zeros(qcv.data.shape, dtype=np.int64)
    for lr in passes:
        total += lr
    if int(total.max(initial=0)) > U16_MAX:
        raise AssertionError("filtered volume overflowed 16 bits")
    filtered = FilteredVolume(total.astype(np.uint16), qcv.search)
    best = np.argmin(filtered.data, axis=2)
    flow = FlowField.dense(qcv.search.label_vectors()[best].astype(np.float64))
    return filtered, flow


def flow_energy(flow, qcv, img, params):
    """Discrete energy of a fully valid integer flow field.

    Unary costs are the quantized entries; pairwise terms use the same
    integer-rounded P1 / P2 / P2/Q as the passes. The neighbour sum runs over
    every pixel's 4 neighbours, so each unordered pair is counted twice.
    """
    if not np.all(flow.valid):
        raise ValueError("flow_energy needs a fully valid flow field")
    r = qcv.search.r_max
    v = flow.vectors
    if not np.array_equal(v, np.rint(v)) or np.abs(v).max(initial=0) > r:
        raise ValueError("flow vectors must be integer labels inside the search range")
    vx = v[..., 0].astype(np.int64)
    vy = v[..., 1].astype(np.int64)
    lab = qcv.search.label_index(vx, vy)
    unary = np.take_along_axis(qcv.data.astype(np.int64), lab[..., None], axis=2).sum()

    pair = 0
    for axis in (0, 1):
        pen = _edge_penalties(img, params, axis)
        jump = np.abs(np.diff(vx, axis=axis)) + np.abs(np.diff(vy, axis=axis))
        cost = np.where(jump == 1, params.p1, 0) + np.where(jump > 1, pen, 0)
        pair += 2 * int(cost.sum())
    return float(unary + pair)


def consistency_check(fwd, bwd, tau=1.0):
    """Keep p iff p + fwd(p) lands in-frame and bwd there negates fwd(p) within tau."""
    if fwd.shape != bwd.shape:
        raise ValueError("forward and backward flows differ in size")
    h, w = fwd.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.rint(xs + fwd.vectors[..., 0])
    ty = np.rint(ys + fwd.vectors[..., 1])
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & fwd.valid
    txi = np.where(inside, tx, 0).astype(np.int64)
    tyi = np.where(inside, ty, 0).astype(np.int64)
    back = bwd.vectors[tyi, txi]
    err = np.linalg.norm(fwd.vectors + back, axis=-1)
    keep = inside & bwd.valid[tyi, txi] & (err <= tau)
    return FlowField(fwd.vectors.copy(), keep)


def dump_filtered(path, fv):
    """Debug dump: DCFV magic, W, H, r_max (u32 LE) then uint16 LE entries."""
    h, w = fv.shape
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<III", w, h, fv.search.r_max))
        fh.write(np.ascontiguousarray(fv.data, dtype="<u2").tobytes())
