"""Endpoint-error metrics and evaluation reports."""

import json
from dataclasses import dataclass, field

import numpy as np


def _epe(flow, gt):
    if flow.shape != gt.shape:
        raise ValueError(f"flow {flow.shape} and ground truth {gt.shape} differ in size")
    mask = gt.valid
    if not mask.any():
        raise ValueError("ground truth has no valid pixels")
    return np.linalg.norm(flow.vectors[mask] - gt.vectors[mask], axis=-1), mask


def aepe(flow, gt):
    """Mean endpoint error over ground-truth-valid pixels."""
    err, _ = _epe(flow, gt)
    return float(err.mean())


def fl_all(flow, gt, thresh=3.0, kitti=False):
    """Percentage of valid pixels whose endpoint error exceeds ``thresh`` px.

    With ``kitti`` a pixel only counts as wrong if its error also exceeds 5%
    of the ground-truth magnitude.
    """
    err, mask = _epe(flow, gt)
    bad = err > thresh
    if kitti:
        bad &= err > 0.05 * np.linalg.norm(gt.vectors[mask], axis=-1)
    return float(100.0 * bad.sum() / bad.size)


@dataclass
class ImageScore:
    name: str
    aepe: float
    fl_all: float
    n_pixels: int


@dataclass
class EvalReport:
    aepe: float
    fl_all: float
    n_pixels: int
    per_image: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores):
        """Pixel-weighted aggregate; independent of the order of ``scores``."""
        scores = sorted(scores, key=lambda s: s.name)
        n = sum(s.n_pixels for s in scores)
        if n == 0:
            return cls(0.0, 0.0, 0, scores)
        epe_sum = sum(s.aepe * s.n_pixels for s in scores)
        bad_sum = sum(s.fl_all * s.n_pixels for s in scores)
        return cls(epe_sum / n, bad_sum / n, n, scores)

    def to_dict(self):
        return {
            "aepe": self.aepe,
            "fl_all": self.fl_all,
            "n_pixels": self.n_pixels,
            "per_image": [{"name": s.name, "aepe": s.aepe, "fl_all": s.fl_all}
                          for s in self.per_image],
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def table(self):
        lines = [f"{'image':<24} {'AEPE':>8} {'Fl-all %':>9}"]
        for s in self.per_image:
            lines.append(f"{s.name:<24} {s.aepe:>8.3f} {s.fl_all:>9.2f}")
        lines.append(f"{'TOTAL':<24} {self.aepe:>8.3f} {self.fl_all:>9.2f}")
        return "\n".join(lines)


def score(name, flow, gt, thresh=3.0, kitti=False):
    return ImageScore(name, aepe(flow, gt), fl_all(flow, gt, thresh, kitti), int(gt.valid.sum()))

