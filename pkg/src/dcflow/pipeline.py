"""End-to-end flow estimation.

normalize -> downsample by 3 -> embed both frames -> quantized cost volumes
in both directions -> Flow-SGM -> forward/backward consistency -> lift to
full resolution -> homography inpainting (accurate mode) -> edge-aware
interpolation of whatever is left.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import costvolume, embedder, flowsgm, postprocess
from .fields import FlowField

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

FACTOR = 3
MODES = ("fast", "accurate")


@dataclass
class PipelineConfig:
    d: int = 64
    r_max: int = 100
    mode: str = "fast"
    sgm: flowsgm.SgmParams = field(default_factory=flowsgm.SgmParams)
    post: postprocess.PostprocessParams = field(default_factory=postprocess.PostprocessParams)
    model_path: str = None
    threads: int = 1
    seed: int = 0
    max_bytes: int = costvolume.DEFAULT_MAX_BYTES

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @classmethod
    def preset(cls, mode, **kw):
        """Fast: r_max 100, no homography inpainting. Accurate: r_max 242, with it."""
        r_max = {"fast": 100, "accurate": 242}[mode]
        return cls(mode=mode, r_max=kw.pop("r_max", r_max), **kw)

    def replace(self, **kw):
        """Copy with overrides; SGM / postprocess fields may be given flat."""
        top, sgm, post = {}, {}, {}
        sgm_names = {f.name for f in dataclasses.fields(flowsgm.SgmParams)}
        post_names = {f.name for f in dataclasses.fields(postprocess.PostprocessParams)}
        for k, v in kw.items():
            if k in sgm_names:
                sgm[k] = v
            elif k in post_names:
                post[k] = v
            elif k in {f.name for f in dataclasses.fields(self)}:
                top[k] = v
            else:
                raise KeyError(f"unknown config key {k!r}")
        if sgm:
            top["sgm"] = dataclasses.replace(top.get("sgm", self.sgm), **sgm)
        if post:
            top["post"] = dataclasses.replace(top.get("post", self.post), **post)
        return dataclasses.replace(self, **top)


def load_config(path, base=None):
    """Read a TOML key = value file; keys may be flat or under [sgm] / [postprocess]."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict) and k in ("sgm", "postprocess", "post"):
            flat.update(v)
        else:
            flat[k] = v
    if "directions" in flat:
        flat["directions"] = tuple(flat["directions"])
    return (base or PipelineConfig()).replace(**flat)


def downsample3(img):
    """Mean of each 3x3 block; trailing rows / columns that do not fill a block are dropped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h < FACTOR or w < FACTOR:
        raise ValueError(f"image {h}x{w} is smaller than one 3x3 block")
    hh, ww = h // FACTOR, w // FACTOR
    blocks = img[:hh * FACTOR, :ww * FACTOR].reshape((hh, FACTOR, ww, FACTOR) + img.shape[2:])
    return blocks.mean(axis=(1, 3))


def downsample_flow(gt):
    """Working-resolution ground truth sampled at block centers, divided by 3."""
    h, w = gt.shape
    hh, ww = h // FACTOR, w // FACTOR
    ys = FACTOR * np.arange(hh) + FACTOR // 2
    xs = FACTOR * np.arange(ww) + FACTOR // 2
    return FlowField(gt.vectors[np.ix_(ys, xs)] / FACTOR, gt.valid[np.ix_(ys, xs)])


def prepare_training_pair(img1, img2, gt):
    """Full-resolution pair -> (normalized working-res img1, img2, gt / 3)."""
    return (downsample3(embedder.normalize_image(img1)),
            downsample3(embedder.normalize_image(img2)),
            downsample_flow(gt))


@dataclass
class PipelineResult:
    flow: FlowField            # dense, full resolution
    wta: FlowField             # forward winner-take-all, working resolution
    forward: FlowField         # forward Flow-SGM, working resolution
    backward: FlowField
    semi: FlowField            # forward flow after the consistency check
    matches: postprocess.MatchSet
    covered: np.ndarray        # full-res pixels filled by homographies
    bmap: np.ndarray = None


def _map(pool, fn, *args):
    if pool is None:
        return [fn(*a) for a in zip(*args)]
    return list(pool.map(fn, *args))


def estimate(img1, img2, params, config=None):
    """Run the whole pipeline and keep the intermediate fields."""
    config = config or PipelineConfig()
    img1 = np.asarray(img1, dtype=np.float64)
    img2 = np.asarray(img2, dtype=np.float64)
    if img1.shape != img2.shape:
        raise ValueError(f"frames differ in size: {img1.shape} vs {img2.shape}")
    if params.dim != config.d:
        log.warning("model has d=%d, config says d=%d; using the model", params.dim, config.d)
    search = costvolume.SearchRange(config.r_max)
    threads = config.threads

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        full = _map(pool, embedder.normalize_image, (img1, img2))
        small = _map(pool, downsample3, full)
        feats = _map(pool, lambda im: embedder.forward_embed(im, params), small)
        qcvs = _map(pool, lambda a, b: costvolume.build_quantized_cost_volume(
            a, b, search, config.max_bytes, threads=1), (feats[0], feats[1]), (feats[1], feats[0]))
        sgm = _map(pool, lambda q, im: flowsgm.flow_sgm(q, im, config.sgm)[1], qcvs, small)
    finally:
        if pool is not None:
            pool.shutdown()
    wta = costvolume.wta_flow(qcvs[0])
    fwd, bwd = sgm
    semi = flowsgm.consistency_check(fwd, bwd, config.sgm.consistency_tau)
    if not semi.valid.any():
        log.warning("no match survived the consistency check; using raw forward flow")
        semi = fwd
    matches = postprocess.upscale_matches(semi, FACTOR)

    shape = img1.shape[:2]
    bmap = postprocess.boundary_map(full[0])
    dense = np.zeros(shape + (2,))
    covered = np.zeros(shape, dtype=bool)
    if config.mode == "accurate":
        hier = postprocess.segment_hierarchy(bmap, config.post.t1, config.post.t2)
        dense, covered = postprocess.homography_inpaint(hier, matches, config.post, config.seed)
    p = config.post
    rest = postprocess.epic_interpolate(matches, bmap, ~covered, p.knn, p.lam, p.sigma)
    dense = np.where(covered[..., None], dense, rest)
    return PipelineResult(FlowField.dense(dense), wta, fwd, bwd, semi, matches, covered, bmap)


def compute_flow(img1, img2, params, config=None):
    """Dense full-resolution flow from img1 to img2."""
    return estimate(img1, img2, params, config).flow
