"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines bypass
output capture so they show up in the log.
"""

import time

import numpy as np
import pytest

import scenes
from dcflow import costvolume, embedder, flowio, metrics, pipeline
from dcflow.fields import FlowField
from dcflow.pipeline import PipelineConfig
from test_costvolume import cost_identity_error, oracle_difference
from test_embedder import finite_difference_check
from test_flowsgm import bound_trial, chain_oracle_trial, zero_penalty_collapse
from test_postprocess import ransac_trial

DIRS = ("+x", "-x", "+y", "-y")


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def cfg():
    return PipelineConfig(d=16, r_max=scenes.R_MAX)


def test_01_gradient_oracle(verdict):
    t0 = time.perf_counter()
    err, plain, n, kinked = finite_difference_check(n_triplets=20, n_weights=240, step=1e-4)
    dt = time.perf_counter() - t0
    verdict(1, err < 1e-3 and n >= 200 and dt < 60,
            f"rel err {err:.2e} over {n} weights, 20 triplets ({kinked} kink stencils, "
            f"raw-loss FD {plain:.2e}), {dt:.1f} s")


def test_02_cost_identity(verdict):
    err = cost_identity_error(n=10_000)
    verdict(2, err < 1e-6, f"max identity error {err:.2e} over 10000 pairs")


def test_03_cost_volume_oracle(verdict):
    diff = oracle_difference(16, 16, r=3)
    verdict(3, diff < 1e-5, f"max abs diff {diff:.2e} on 16x16, r_max=3")


def test_04_chain_dp_oracle(verdict):
    t0 = time.perf_counter()
    results = [chain_oracle_trial(seed, DIRS[seed % 4]) for seed in range(50)]
    dt = time.perf_counter() - t0
    exact = sum(got == best for got, best in results)
    verdict(4, exact == 50 and dt < 60,
            f"{exact}/50 strips at the exhaustive minimum (6561 labelings each), {dt:.1f} s")


def test_05_zero_penalty_collapse(verdict):
    same = [zero_penalty_collapse(seed) for seed in range(10)]
    verdict(5, all(same), f"{sum(same)}/10 volumes bitwise equal to WTA")


def test_06_sixteen_bit_bound(verdict):
    ok = 0
    for seed in range(100):
        top, bound, top_pass, pass_bound = bound_trial(seed)
        ok += top <= bound <= 65535 and top_pass <= pass_bound
    verdict(6, ok == 100, f"{ok}/100 parameterizations within bound")


def unique_texture_mask(shape, v, radius=4):
    """Working-res pixels whose own patch and matched patch lie in frame."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + v[0], ys + v[1]
    inside = (xs >= radius) & (xs < w - radius) & (ys >= radius) & (ys < h - radius)
    return inside & (tx >= radius) & (tx < w - radius) & (ty >= radius) & (ty < h - radius)


@pytest.mark.slow
def test_07_translation_end_to_end(verdict, tiny_model, cfg):
    img1, img2, gt = scenes.translation_scene(shift=(6, -3))
    res = pipeline.estimate(img1, img2, tiny_model, cfg)
    err = metrics.aepe(res.flow, gt)
    mask = unique_texture_mask(res.wta.shape, (2, -1))
    exact = np.all(res.wta.vectors == (2, -1), axis=-1)[mask].mean()
    verdict(7, err < 1.0 and exact >= 0.95,
            f"AEPE {err:.3f} px on valid overlap, WTA exact on {100 * exact:.1f}% "
            f"of {mask.sum()} unique-texture pixels")


def test_08_homography_recovery(verdict):
    trials = [ransac_trial(seed, 70, 30, eps=1.0) for seed in range(20)]
    worst = max(e for e, _ in trials)
    ok = sum(e < 0.5 for e, _ in trials)
    verdict(8, ok == 20, f"{ok}/20 trials recovered H, worst inlier transfer error {worst:.2e} px")


@pytest.mark.slow
def test_09_inpainting_benefit(verdict, tiny_model, cfg):
    fast, acc = [], []
    for i in range(20):
        img1, img2, gt, _ = scenes.homography_scene(i)
        ref = scenes.dense(gt)
        fast.append(metrics.aepe(pipeline.compute_flow(img1, img2, tiny_model, cfg), ref))
        acc.append(metrics.aepe(
            pipeline.compute_flow(img1, img2, tiny_model, cfg.replace(mode="accurate")), ref))
    fast, acc = np.array(fast), np.array(acc)
    share = np.mean(acc <= fast)
    verdict(9, share >= 0.8 and acc.mean() < fast.mean(),
            f"accurate <= fast in {100 * share:.0f}% of 20 scenes, "
            f"mean AEPE {acc.mean():.3f} vs {fast.mean():.3f}")


@pytest.mark.slow
def test_10_dimensionality_trend(verdict, cfg):
    errs = {8: [], 32: []}
    for seed in range(5):
        img1, img2, gt = scenes.translation_scene(seed=200 + seed, shift=(6, -3))
        for d in errs:
            params = scenes.train_tiny(d=d, steps=500, seed=seed)
            flow = pipeline.compute_flow(img1, img2, params, cfg.replace(d=d))
            errs[d].append(metrics.aepe(flow, gt))
    m8, m32 = np.mean(errs[8]), np.mean(errs[32])
    verdict(10, m32 <= m8 + 0.1,
            f"mean AEPE d=32 {m32:.3f} vs d=8 {m8:.3f} over 5 seeds (500 steps each)")


def test_11_format_round_trip(verdict, tmp_path):
    rng = np.random.default_rng(11)
    flow = FlowField(rng.normal(size=(13, 17, 2)).astype(np.float32).astype(np.float64),
                     rng.random((13, 17)) > 0.1)
    flowio.write_flo(tmp_path / "a.flo", flow)
    back = flowio.read_flo(tmp_path / "a.flo")
    flowio.write_flo(tmp_path / "b.flo", back)
    flo_ok = (np.array_equal(back.vectors[flow.valid], flow.vectors[flow.valid])
              and np.array_equal(back.valid, flow.valid)
              and (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes())

    schedule = embedder.TrainSchedule(stages=[(5, 0.1)], batch_size=12)
    params = embedder.train(scenes.translation_dataset(2, seed=4), schedule, d=8, hidden=16,
                            log_every=0)
    embedder.save_params(tmp_path / "m.dcfe", params)
    loaded = embedder.load_params(tmp_path / "m.dcfe")
    img = rng.random((20, 24, 3))
    model_ok = np.array_equal(embedder.forward_embed(img, params),
                              embedder.forward_embed(img, loaded))
    verdict(11, flo_ok and model_ok, f".flo bitwise {flo_ok}, model forward identical {model_ok}")


@pytest.mark.slow
def test_12_determinism_across_threads(verdict, tiny_model, cfg, tmp_path):
    img1, img2, _, _ = scenes.homography_scene(3)
    blobs = []
    for threads in (1, 4):
        c = cfg.replace(mode="accurate", threads=threads, seed=7)
        path = tmp_path / f"t{threads}.flo"
        flowio.write_flo(path, pipeline.compute_flow(img1, img2, tiny_model, c))
        blobs.append(path.read_bytes())
    verdict(12, blobs[0] == blobs[1], f"1-thread and 4-thread .flo byte-identical: {blobs[0] == blobs[1]}")
