"""Patch embedding network: forward pass, backprop, triplet training.

The network is four valid 3x3 convolutions (3 -> 64 -> 64 -> 64 -> d) with
ReLU after the first three layers and an L2 normalization at the end, so a
9x9 patch maps to one unit vector. Arrays are channels-last throughout:
images are (H, W, 3) and patch batches (B, 9, 9, 3).
"""

import logging
import queue
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .fields import FlowField

log = logging.getLogger(__name__)

PATCH = 9
HALF = PATCH // 2
N_LAYERS = 4
NORM_EPS = 1e-8

MODEL_MAGIC = b"DCFE"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


def normalize_image(raw):
    """Scale an (H, W, 3) image to zero mean and unit standard deviation.

    Statistics are taken jointly over all pixels and channels.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    std = img.std()
    if std == 0 or not np.isfinite(std):
        raise ValueError("degenerate image: zero standard deviation")
    return (img - img.mean()) / std


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class NetworkParams:
    """Weights (out, in, 3, 3) and biases (out,) of the four conv layers."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ValueError(f"network must have exactly {N_LAYERS} layers")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ValueError(f"layer {k}: kernels must be 3x3, got {w.shape}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} != ({w.shape[0]},)")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input channels do not chain")
        if self.weights[0].shape[1] != 3:
            raise ValueError("first layer must take 3 input channels")

    @property
    def dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        """All parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return NetworkParams([np.zeros_like(w) for w in self.weights],
                             [np.zeros_like(b) for b in self.biases])

    def as_float32_values(self):
        """Copy with every value rounded to float32 (what the model file stores)."""
        return NetworkParams(
            [w.astype(np.float32).astype(np.float64) for w in self.weights],
            [b.astype(np.float32).astype(np.float64) for b in self.biases],
        )


def init_params(d=64, hidden=64, seed=0):
    """Uniform init in [-s, s] with s = sqrt(1 / (in_channels * 9)), zero bias."""
    if d < 1:
        raise ValueError("feature dimension d must be >= 1")
    rng = np.random.default_rng(seed)
    plan = [3, hidden, hidden, hidden, d]
    weights, biases = [], []
    for cin, cout in zip(plan[:-1], plan[1:]):
        s = np.sqrt(1.0 / (cin * 9))
        weights.append(rng.uniform(-s, s, size=(cout, cin, 3, 3)))
        biases.append(np.zeros(cout))
    return NetworkParams(weights, biases)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _im2col(x):
    # (B, H, W, C) -> (B, H-2, W-2, 9*C), column order (ky, kx, c)
    h, w = x.shape[1] - 2, x.shape[2] - 2
    return np.concatenate([x[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)


def _kernel_matrix(w):
    # (Cout, Cin, 3, 3) -> (9*Cin, Cout) matching _im2col's column order
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def _conv(x, w, b):
    cols = _im2col(x)
    out = cols.reshape(-1, cols.shape[-1]) @ _kernel_matrix(w) + b
    return out.reshape(cols.shape[:-1] + (w.shape[0],)), cols


def _conv_backward(cols, x_shape, w, gout, need_dx=True):
    cout, cin = w.shape[:2]
    g2 = gout.reshape(-1, cout)
    dw = (cols.reshape(-1, 9 * cin).T @ g2).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = g2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (g2 @ _kernel_matrix(w).T).reshape(gout.shape[:-1] + (9 * cin,))
        dx = np.zeros(x_shape)
        h, wd = gout.shape[1], gout.shape[2]
        k = 0
        for i in range(3):
            for j in range(3):
                dx[:, i:i + h, j:j + wd, :] += dcols[..., k * cin:(k + 1) * cin]
                k += 1
    return dw, db, dx


def _forward(x, params, keep=False):
    cache = []
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        x_shape = h.shape
        h, cols = _conv(h, w, b)
        if k < N_LAYERS - 1:
            h = np.maximum(h, 0.0)
        if keep:
            cache.append((cols, x_shape, h))
    norm = np.sqrt(np.sum(h * h, axis=-1, keepdims=True))
    f = h / np.maximum(norm, NORM_EPS)
    return (f, cache, norm) if keep else f


def embed_patches(patches, params):
    """Embed a batch of (B, 9, 9, 3) patches into (B, d) unit vectors."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[1:] != (PATCH, PATCH, 3):
        raise ValueError(f"patches must be (B, 9, 9, 3), got {patches.shape}")
    return _forward(patches, params)[:, 0, 0, :]


def forward_embed(img, params, pad=True, band=64):
    """Per-pixel feature grid of an (H, W, 3) image.

    With ``pad`` the image is replicate-padded by 4 px so the grid is (H, W, d)
    and pixel-aligned; without it the grid shrinks by 4 px per side. Rows are
    processed in bands of ``band`` output rows to bound memory; every output
    value depends only on its own 9x9 input window.
    """
    img = np.asarray(img, dtype=np.float64)
    if pad:
        img = np.pad(img, ((HALF, HALF), (HALF, HALF), (0, 0)), mode="edge")
    if img.shape[0] < PATCH or img.shape[1] < PATCH:
        raise ValueError(f"image too small for a 9x9 receptive field: {img.shape[:2]}")
    h_out = img.shape[0] - 2 * HALF
    bands = []
    for r0 in range(0, h_out, band):
        r1 = min(r0 + band, h_out)
        chunk = img[None, r0:r1 + 2 * HALF]
        bands.append(_forward(chunk, params)[0])
    return np.concatenate(bands, axis=0)


def _backward(params, cache, norm, f, gf):
    """Backprop gf = dL/df (B, 1, 1, d) through normalization, ReLU and convs."""
    n = np.maximum(norm, NORM_EPS)
    gz = (gf - f * np.sum(f * gf, axis=-1, keepdims=True)) / n
    gz = np.where(norm < NORM_EPS, 0.0, gz)
    grads = params.zeros_like()
    g = gz
    for k in range(N_LAYERS - 1, -1, -1):
        cols, x_shape, out = cache[k]
        if k < N_LAYERS - 1:
            g = g * (out > 0)
        dw, db, g = _conv_backward(cols, x_shape, params.weights[k], g, need_dx=k > 0)
        grads.weights[k] = dw
        grads.biases[k] = db
    return grads


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------


@dataclass
class TripletBatch:
    """Unique patches plus (anchor, positive, negative) index triples.

    Anchors are shared between their three triplets so each patch is only
    pushed through the network once. ``centers`` holds the (x, y) pixel of
    each patch and ``source`` which image it came from (0 or 1).
    """

    patches: np.ndarray
    triplets: np.ndarray
    centers: np.ndarray = None
    source: np.ndarray = None

    def __len__(self):
        return len(self.triplets)

    @classmethod
    def from_arrays(cls, xa, xp, xn):
        """Build a batch from three aligned (T, 9, 9, 3) patch arrays."""
        t = len(xa)
        patches = np.concatenate([xa, xp, xn], axis=0)
        idx = np.arange(t)
        return cls(patches, np.stack([idx, idx + t, idx + 2 * t], axis=1))


def concat_batches(batches):
    offset = 0
    patches, triplets, centers, source = [], [], [], []
    for b in batches:
        patches.append(b.patches)
        triplets.append(b.triplets + offset)
        centers.append(b.centers)
        source.append(b.source)
        offset += len(b.patches)
    has_meta = all(c is not None for c in centers)
    return TripletBatch(
        np.concatenate(patches),
        np.concatenate(triplets),
        np.concatenate(centers) if has_meta else None,
        np.concatenate(source) if has_meta else None,
    )


def _triplet_terms(f, triplets, margin):
    fa, fp, fn = f[triplets[:, 0]], f[triplets[:, 1]], f[triplets[:, 2]]
    dpos = np.sum((fa - fp) ** 2, axis=1)
    dneg = np.sum((fa - fn) ** 2, axis=1)
    return margin + dpos - dneg, fa, fp, fn


def triplet_loss(batch, params, margin=0.2):
    f = embed_patches(batch.patches, params)
    hinge, *_ = _triplet_terms(f, batch.triplets, margin)
    return float(np.sum(np.maximum(hinge, 0.0)) / len(batch))


def triplet_loss_and_grad(batch, params, margin=0.2):
    """Mean hinge triplet loss over the batch and its exact parameter gradient."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    x = np.asarray(batch.patches, dtype=np.float64)
    f4, cache, norm = _forward(x, params, keep=True)
    f = f4[:, 0, 0, :]
    hinge, fa, fp, fn = _triplet_terms(f, batch.triplets, margin)
    t = len(batch)
    loss = float(np.sum(np.maximum(hinge, 0.0)) / t)

    active = hinge > 0
    tri = batch.triplets[active]
    scale = 2.0 / t
    gf = np.zeros_like(f)
    np.add.at(gf, tri[:, 0], scale * (fn[active] - fp[active]))
    np.add.at(gf, tri[:, 1], -scale * (fa[active] - fp[active]))
    np.add.at(gf, tri[:, 2], scale * (fa[active] - fn[active]))
    grads = _backward(params, cache, norm, f4, gf[:, None, None, :])
    return loss, grads


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def sgd_step(params, grads, velocity, lr, momentum=0.9):
    """Heavy-ball momentum: v <- momentum * v - lr * g; theta <- theta + v."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    new_p, new_v = params.copy(), velocity.copy()
    for p, g, v in zip(new_p.arrays(), grads.arrays(), new_v.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: {p.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return new_p, new_v


# integer offsets with 1 <= |o| <= 5
_R = np.arange(-5, 6)
_OY, _OX = np.meshgrid(_R, _R, indexing="ij")
_RING = (_OX ** 2 + _OY ** 2 >= 1) & (_OX ** 2 + _OY ** 2 <= 25)
NEG_OFFSETS = np.stack([_OX[_RING], _OY[_RING]], axis=1)
N_NEGATIVES = 3


def _extract(img, cx, cy):
    r = np.arange(-HALF, HALF + 1)
    return img[cy[:, None, None] + r[None, :, None], cx[:, None, None] + r[None, None, :]]


def _inside(cx, cy, w, h):
    return (cx >= HALF) & (cx < w - HALF) & (cy >= HALF) & (cy < h - HALF)


def valid_anchors(img1, img2, gt_flow):
    """Mask of anchor pixels whose anchor and positive patches lie in-frame."""
    h1, w1 = img1.shape[:2]
    h2, w2 = img2.shape[:2]
    ys, xs = np.mgrid[0:h1, 0:w1]
    px = np.rint(xs + gt_flow.vectors[..., 0])
    py = np.rint(ys + gt_flow.vectors[..., 1])
    ok = gt_flow.valid & _inside(xs, ys, w1, h1) & np.isfinite(px) & np.isfinite(py)
    return ok & _inside(np.nan_to_num(px), np.nan_to_num(py), w2, h2)


def sample_triplets(img1, img2, gt_flow, count, rng_seed=0):
    """Draw ``count`` anchors and emit three triplets per anchor.

    The positive sits at the anchor displaced by the rounded ground-truth
    flow; the three negatives are distinct in-frame patches whose centers lie
    1 to 5 px (Euclidean) from the positive center.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h2, w2 = img2.shape[:2]
    mask = valid_anchors(img1, img2, gt_flow)
    cand = np.flatnonzero(mask)
    if cand.size == 0:
        raise ValueError("no valid anchor: ground truth never maps an in-frame patch in-frame")

    pick = cand[rng.integers(0, cand.size, size=count)]
    ay, ax = np.divmod(pick, img1.shape[1])
    px = np.rint(ax + gt_flow.vectors[ay, ax, 0]).astype(np.int64)
    py = np.rint(ay + gt_flow.vectors[ay, ax, 1]).astype(np.int64)

    nx = px[:, None] + NEG_OFFSETS[None, :, 0]
    ny = py[:, None] + NEG_OFFSETS[None, :, 1]
    ok = _inside(nx, ny, w2, h2)
    if np.any(ok.sum(axis=1) < N_NEGATIVES):
        raise ValueError("image too small to place three negatives")
    keys = np.where(ok, rng.random(ok.shape), np.inf)
    choice = np.argsort(keys, axis=1, kind="stable")[:, :N_NEGATIVES]
    nx = np.take_along_axis(nx, choice, axis=1)
    ny = np.take_along_axis(ny, choice, axis=1)

    patches = np.concatenate([
        _extract(img1, ax, ay),
        _extract(img2, px, py),
        _extract(img2, nx.ravel(), ny.ravel()),
    ])
    a = np.arange(count)
    triplets = np.stack([
        np.repeat(a, N_NEGATIVES),
        np.repeat(a + count, N_NEGATIVES),
        2 * count + np.arange(count * N_NEGATIVES),
    ], axis=1)
    centers = np.concatenate([
        np.stack([ax, ay], 1), np.stack([px, py], 1), np.stack([nx.ravel(), ny.ravel()], 1)
    ])
    source = np.concatenate([np.zeros(count, int), np.ones(count * (1 + N_NEGATIVES), int)])
    return TripletBatch(patches, triplets, centers, source)


@dataclass
class TrainSchedule:
    stages: list = field(default_factory=lambda: [(10_000, 1e-1), (10_000, 1e-2), (20_000, 1e-3)])
    batch_size: int = 30_000
    momentum: float = 0.9
    margin: float = 0.2
    prefetch: int = 2

    @property
    def total_iterations(self):
        return sum(n for n, _ in self.stages)


def _sample_from_dataset(dataset, n_triplets, rng):
    anchors = max(1, -(-n_triplets // N_NEGATIVES))
    counts = rng.multinomial(anchors, np.full(len(dataset), 1.0 / len(dataset)))
    parts = [sample_triplets(i1, i2, gt, c, rng) for (i1, i2, gt), c in zip(dataset, counts) if c]
    return concat_batches(parts)


def _producer(dataset, schedule, rng, out, stop):
    try:
        for _ in range(schedule.total_iterations):
            batch = _sample_from_dataset(dataset, schedule.batch_size, rng)
            while not stop.is_set():
                try:
                    out.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if stop.is_set():
                return
    except Exception as exc:  # handed to the consumer
        out.put(exc)


def train(dataset, schedule=None, rng_seed=0, params=None, d=64, hidden=64,
          on_step=None, log_every=100):
    """Train the embedding with triplet loss and momentum SGD.

    ``dataset`` is a list of (img1, img2, gt_flow) at working resolution,
    images already normalized. Triplets are produced by a background thread
    into a bounded queue; the batch stream only depends on ``rng_seed`` so the
    run is reproducible. Returned weights are rounded to float32 values so
    they survive the model file unchanged.
    """
    schedule = schedule or TrainSchedule()
    if not dataset:
        raise ValueError("empty training dataset")
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    if params is None:
        params = init_params(d=d, hidden=hidden, seed=seeds[0])
    if schedule.total_iterations == 0:
        return params.copy()

    rng = np.random.default_rng(seeds[1])
    batches = queue.Queue(maxsize=max(1, schedule.prefetch))
    stop = threading.Event()
    worker = threading.Thread(target=_producer, args=(dataset, schedule, rng, batches, stop),
                              daemon=True)
    worker.start()
    velocity = params.zeros_like()
    step = 0
    running = None
    try:
        for n_iter, lr in schedule.stages:
            for _ in range(n_iter):
                batch = batches.get()
                if isinstance(batch, Exception):
                    raise batch
                loss, grads = triplet_loss_and_grad(batch, params, schedule.margin)
                params, velocity = sgd_step(params, grads, velocity, lr, schedule.momentum)
                running = loss if running is None else 0.98 * running + 0.02 * loss
                if on_step is not None:
                    on_step(step, loss)
                if log_every and step % log_every == 0:
                    log.info("step %d lr %g loss %.4f (running %.4f)", step, lr, loss, running)
                step += 1
    finally:
        stop.set()
        worker.join()
    return params.as_float32_values()


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------


def save_params(path, params):
    """Write the DCFE model file (little-endian, float32 weights)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, params.dim))
        for w, b in zip(params.weights, params.biases):
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a DCFE model file")
    if len(data) < 12:
        raise ModelFormatError("truncated header")
    version, d = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    pos = 12
    weights, biases = [], []
    for _ in range(N_LAYERS):
        if pos + 8 > len(data):
            raise ModelFormatError("truncated layer header")
        cout, cin = struct.unpack_from("<II", data, pos)
        pos += 8
        nw = cout * cin * 9
        end = pos + 4 * (nw + cout)
        if end > len(data):
            raise ModelFormatError("truncated layer payload")
        w = np.frombuffer(data, "<f4", nw, pos).reshape(cout, cin, 3, 3)
        b = np.frombuffer(data, "<f4", cout, pos + 4 * nw)
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
        pos = end
    if pos != len(data):
        raise ModelFormatError("trailing bytes after last layer")
    params = NetworkParams(weights, biases)
    if params.dim != d:
        raise ModelFormatError(f"header says d={d} but last layer has {params.dim} filters")
    return params
