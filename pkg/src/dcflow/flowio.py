"""Middlebury .flo files, image files and flow visualization."""

import os

import numpy as np
from PIL import Image

from .fields import FlowField

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e10
UNKNOWN_THRESH = 1e9


class FloError(ValueError):
    pass


class FloMagicError(FloError):
    pass


class FloSizeError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


def write_flo(path, flow):
    """Little-endian .flo: f32 magic, i32 width, i32 height, (u, v) f32 pairs.

    Invalid pixels are written as 1e10 in both components.
    """
    if not isinstance(flow, FlowField):
        flow = FlowField.dense(flow)
    h, w = flow.shape
    data = flow.vectors.astype("<f4")
    data[~flow.valid] = UNKNOWN_FLOW
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], "<f4").tobytes())
        fh.write(np.array([w, h], "<i4").tobytes())
        fh.write(np.ascontiguousarray(data).tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or np.frombuffer(raw, "<f4", 1)[0] != np.float32(FLO_MAGIC):
        raise FloMagicError(f"bad magic in {path}")
    if len(raw) < 12:
        raise FloTruncatedError(f"truncated header in {path}")
    w, h = (int(v) for v in np.frombuffer(raw, "<i4", 2, 4))
    if w <= 0 or h <= 0:
        raise FloSizeError(f"nonpositive dimensions {w}x{h} in {path}")
    n = 2 * w * h
    if len(raw) < 12 + 4 * n:
        raise FloTruncatedError(f"payload of {path} shorter than {w}x{h} flow")
    vec = np.frombuffer(raw, "<f4", n, 12).reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.abs(vec) < UNKNOWN_THRESH, axis=-1) & np.all(np.isfinite(vec), axis=-1)
    return FlowField(vec, valid)


def read_image(path):
    """8-bit PNG or binary PPM as an (H, W, 3) float array in [0, 255]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def write_image(path, img):
    """Write an (H, W, 3) image; float input is assumed to span [0, 1]."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    fmt = "PPM" if os.path.splitext(str(path))[1].lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr).save(path, format=fmt)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return rgb


def flow_to_color(flow, max_mag=None):
    """HSV coding: hue = direction, saturation = magnitude / max_mag, white at rest.

    Invalid pixels are black. Returns uint8 RGB.
    """
    if not isinstance(flow, FlowField):
        flow = FlowField.dense(flow)
    u, v = flow.vectors[..., 0], flow.vectors[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = mag[flow.valid].max(initial=0.0)
    max_mag = max_mag if max_mag > 0 else 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(hue))
    rgb[~flow.valid] = 0.0
    return np.rint(rgb * 255).astype(np.uint8)
