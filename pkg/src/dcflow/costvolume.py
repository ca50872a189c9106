"""Full 4D matching cost volume from two feature grids.

Labels are the displacements {-r..r}^2 enumerated with v_y as the outer and
v_x as the inner index: ``label = (vy + r) * (2r + 1) + (vx + r)``. Volumes are
stored pixel-major as (H, W, n_labels) so all labels of a pixel are
contiguous.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fields import FlowField

SENTINEL = 2.0
QSENTINEL = 255
QSCALE = 255.0 / 2.0
DEFAULT_MAX_BYTES = 2 << 30

DUMP_MAGIC = b"DCCV"


class AllocationError(MemoryError):
    pass


@dataclass(frozen=True)
class SearchRange:
    r_max: int

    def __post_init__(self):
        if int(self.r_max) != self.r_max or self.r_max < 1:
            raise ValueError("r_max must be an integer >= 1")

    @property
    def side(self):
        return 2 * self.r_max + 1

    @property
    def n_labels(self):
        return self.side ** 2

    def label_index(self, vx, vy):
        r = self.r_max
        return (vy + r) * self.side + (vx + r)

    def label_vectors(self):
        """(n_labels, 2) array of (vx, vy) in enumeration order."""
        r = np.arange(-self.r_max, self.r_max + 1)
        vy, vx = np.meshgrid(r, r, indexing="ij")
        return np.stack([vx.ravel(), vy.ravel()], axis=1)


@dataclass
class CostVolume:
    data: np.ndarray  # (H, W, n_labels) float32 in [0, 2]
    search: SearchRange

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass
class QuantizedCostVolume:
    data: np.ndarray  # (H, W, n_labels) uint8
    search: SearchRange
    scale: float = QSCALE

    @property
    def shape(self):
        return self.data.shape[:2]

    def dequantize(self):
        return self.data.astype(np.float64) / self.scale


def _check_grids(f1, f2):
    if f1.shape != f2.shape or f1.ndim != 3:
        raise ValueError(f"feature grids must share shape (H, W, d): {f1.shape} vs {f2.shape}")


def _check_budget(h, w, search, itemsize, max_bytes):
    need = h * w * search.n_labels * itemsize
    if max_bytes is not None and need > max_bytes:
        raise AllocationError(
            f"cost volume needs {need} bytes ({h}x{w} px, {search.n_labels} labels), "
            f"cap is {max_bytes}")
    return need


def _label_slices(h, w, dx, dy):
    # pixels p whose p + (dx, dy) stays in-frame, and the matching target slice
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yt = slice(ys.start + dy, ys.stop + dy)
    xt = slice(xs.start + dx, xs.stop + dx)
    return ys, xs, yt, xt


def _fill(f1, f2, search, out, labels, quantized):
    h, w = f1.shape[:2]
    vecs = search.label_vectors()
    for k in labels:
        dx, dy = int(vecs[k, 0]), int(vecs[k, 1])
        ys, xs, yt, xt = _label_slices(h, w, dx, dy)
        if ys.start >= ys.stop or xs.start >= xs.stop:
            continue
        c = 1.0 - np.einsum("ijk,ijk->ij", f1[ys, xs], f2[yt, xt])
        if quantized:
            out[ys, xs, k] = _quantize_values(c.astype(np.float32).astype(np.float64))
        else:
            out[ys, xs, k] = c


def _run(f1, f2, search, out, quantized, threads):
    n = search.n_labels
    if threads <= 1:
        _fill(f1, f2, search, out, range(n), quantized)
        return
    chunks = [range(i, n, threads) for i in range(threads)]
    with ThreadPoolExecutor(threads) as ex:
        list(ex.map(lambda ch: _fill(f1, f2, search, out, ch, quantized), chunks))


def build_cost_volume(f1, f2, search, max_bytes=DEFAULT_MAX_BYTES, threads=1):
    """C(p, v) = 1 - <F1_p, F2_{p+v}>; out-of-frame labels get cost 2.

    Each entry depends only on its own pair of feature vectors, so the result
    is bitwise identical for any ``threads``.
    """
    if isinstance(search, int):
        search = SearchRange(search)
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_grids(f1, f2)
    h, w = f1.shape[:2]
    _check_budget(h, w, search, 4, max_bytes)
    out = np.full((h, w, search.n_labels), SENTINEL, dtype=np.float32)
    _run(f1, f2, search, out, False, threads)
    return CostVolume(out, search)


def _quantize_values(c):
    # round half away from zero; inputs are non-negative up to slack
    q = np.floor(np.abs(c) * QSCALE + 0.5) * np.sign(c)
    return np.clip(q, 0, 255).astype(np.uint8)


def quantize(cv, slack=1e-6):
    """Map costs in [0, 2] to uint8 via q = round(c * 127.5)."""
    c = cv.data.astype(np.float64)
    if c.size and (c.min() < -slack or c.max() > SENTINEL + slack):
        raise ValueError("cost outside [0, 2]: feature vectors are not unit length")
    return QuantizedCostVolume(_quantize_values(c), cv.search)


def build_quantized_cost_volume(f1, f2, search, max_bytes=DEFAULT_MAX_BYTES, threads=1):
    """Quantized volume built label by label, never holding the float volume.

    Bitwise equal to ``quantize(build_cost_volume(...))``: costs pass through
    float32 before rounding in both paths.
    """
    if isinstance(search, int):
        search = SearchRange(search)
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    _check_grids(f1, f2)
    h, w = f1.shape[:2]
    _check_budget(h, w, search, 1, max_bytes)
    out = np.full((h, w, search.n_labels), QSENTINEL, dtype=np.uint8)
    _run(f1, f2, search, out, True, threads)
    return QuantizedCostVolume(out, search)


def wta_flow(cv):
    """Winner-take-all flow; ties go to the smallest label index."""
    best = np.argmin(cv.data, axis=2)
    vecs = cv.search.label_vectors()
    return FlowField.dense(vecs[best].astype(np.float64))


def dump_volume(path, qcv):
    """Debug dump: DCCV magic, W, H, r_max (u32 LE) then the uint8 entries."""
    h, w = qcv.shape
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<III", w, h, qcv.search.r_max))
        fh.write(np.ascontiguousarray(qcv.data, dtype=np.uint8).tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DUMP_MAGIC:
        raise ValueError("bad magic: not a DCCV dump")
    w, h, r = struct.unpack_from("<III", data, 4)
    search = SearchRange(r)
    body = np.frombuffer(data, np.uint8, offset=16)
    if body.size != w * h * search.n_labels:
        raise ValueError("DCCV payload size does not match header")
    return QuantizedCostVolume(body.reshape(h, w, search.n_labels).copy(), search)
