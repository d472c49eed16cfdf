"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE``; a PASS/FAIL line
per criterion is printed at the end of the pytest run.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from n2nus import cli
from n2nus import n2n_train as t
from n2nus import nn_core as nn
from n2nus.metrics import average_frames, compare_methods, nrmse, psnr, snr_depth_profile, ssim
from n2nus.rf_sim import envelope, to_bmode
from n2nus.scenes import PatchSetup, depth_stack

# desk-scale Noise2Noise experiment shared by criteria 3-5
NOISE_REL = 0.4
NET = nn.UNetConfig(base_channels=16, depth=5)
EPOCHS = 12
TRAIN_MEDIA, HELDOUT_MEDIA, FRAMES = 16, 4, 8


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1 ----------------------------------------------------------------------------------

def test_c01_gradient_check():
    t0 = time.perf_counter()
    cfg = nn.UNetConfig(base_channels=2, depth=2)
    params = nn.ModelParams.initialize(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8))
    err = nn.grad_check(params, x, target, epsilon=1e-5, n_samples=params.size)
    dt = time.perf_counter() - t0
    record(1, err < 1e-4 and dt < 60,
           f"max rel err {err:.2e} over all {params.size} params (< 1e-4), {dt:.1f}s (< 60s)")


# -- 2 ----------------------------------------------------------------------------------

def test_c02_convergence_to_target_mean():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    size, m, sigma = 16, 16, 0.3
    clean = 0.5 * rng.standard_normal((size, size))
    r = (clean + sigma * rng.standard_normal((size, size))).astype(np.float32)
    targets = (clean + sigma * rng.standard_normal((m, size, size))).astype(np.float32)
    noise_rms = float(np.sqrt(np.mean((targets - clean) ** 2)))
    mean = targets.mean(axis=0)

    params = nn.ModelParams.initialize(nn.UNetConfig(base_channels=8, depth=3), seed=0)
    net = nn.UNet(params)
    opt = nn.OptimizerState(lr=2e-3, weight_decay=0.0)
    x = np.repeat(r[None, None], m, axis=0)
    for _ in range(1500):
        pred = net.forward(x)
        _, g = nn.mse_loss(pred, targets[:, None])
        net.backward(g)
        nn.adamw_step(opt, params)
    f = nn.unet_forward(params, r[None, None])[0, 0].astype(np.float64)
    d_mean = float(np.sqrt(np.mean((f - mean) ** 2)))
    d_targets = [float(np.sqrt(np.mean((f - y) ** 2))) for y in targets]
    dt = time.perf_counter() - t0
    ok = d_mean < 0.3 * noise_rms and d_mean < min(d_targets) and dt < 600
    record(2, ok, f"RMS to mean {d_mean:.4f} vs 0.3*noise {0.3 * noise_rms:.4f}, "
                  f"nearest target {min(d_targets):.4f}, {dt:.0f}s (< 600s)")


# -- 3, 4, 5 ---------------------------------------------------------------------------

def _bmode_metrics(clean, img):
    ref_max = envelope(clean).max()
    b0 = to_bmode(clean, 60.0, ref_max).pixels
    b = to_bmode(img, 60.0, ref_max).pixels
    return psnr(b0, b), ssim(b0, b)


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    setup = PatchSetup(noise_rel=NOISE_REL)
    train_stacks = [setup.stack(s, FRAMES) for s in range(TRAIN_MEDIA)]
    held_out = [setup.stack(1000 + s, FRAMES) for s in range(HELDOUT_MEDIA)]
    # validation on a held-back training medium: pairs of seen media cannot reveal overfitting
    config = t.TrainConfig(epochs=EPOCHS, seed=0, split_by="medium")
    train_pairs, val_pairs = t.build_dataset(train_stacks, config)
    data = t.PairData(train_stacks, multiple=NET.size_multiple)
    params = nn.ModelParams.initialize(NET, seed=0)
    best, logbook = t.train(params, data, train_pairs, val_pairs, config)
    return {"setup": setup, "held_out": held_out, "ckpt": best, "log": logbook,
            "seconds": time.perf_counter() - t0}


def test_c03_desk_scale_gain(experiment):
    ck = experiment["ckpt"]
    noisy, den = [], []
    for stack in experiment["held_out"]:
        clean = stack.clean.samples
        for frame in stack.frames:
            noisy.append(_bmode_metrics(clean, frame.samples))
            den.append(_bmode_metrics(clean, t.denoise(ck, frame).samples))
    (p_n, s_n), (p_d, s_d) = np.mean(noisy, axis=0), np.mean(den, axis=0)
    dt = experiment["seconds"]
    ok = 22 <= p_n <= 26 and p_d >= p_n + 6 and s_d > s_n and dt <= 3600 and ck.epoch <= 100
    record(3, ok, f"noisy {p_n:.2f} dB (22-26), denoised {p_d:.2f} dB (gain {p_d - p_n:.2f} >= 6), "
                  f"SSIM {s_n:.3f} -> {s_d:.3f}, best epoch {ck.epoch}/{EPOCHS}, {dt / 60:.1f} min (<= 60)")


def _table(experiment, tremor, first_seed):
    rows = []
    for seed in range(first_seed, first_seed + 4):
        stack = experiment["setup"].stack(seed, 30, tremor_wavelengths=tremor)
        noisy = stack.frames[0]
        rep = compare_methods(stack.clean, noisy, average_frames(stack, 30), t.denoise(experiment["ckpt"], noisy))
        rows.append([[r.psnr_db, r.ssim] for r in rep.rows])
    return np.mean(rows, axis=0)


def test_c04_aligned_ordering(experiment):
    (p_n, _), (p_a, _), (p_d, _) = _table(experiment, 0.0, 2000)
    ok = abs(p_a - p_d) <= 3 and p_a >= p_n + 8 and p_d >= p_n + 8
    record(4, ok, f"noisy {p_n:.2f}, avg30 {p_a:.2f}, denoised {p_d:.2f} dB "
                  f"(|diff| {abs(p_a - p_d):.2f} <= 3, gains {p_a - p_n:.2f} / {p_d - p_n:.2f} >= 8)")


def test_c05_misaligned_ordering(experiment):
    (p_n, s_n), (p_a, s_a), (p_d, s_d) = _table(experiment, 2.0, 2020)
    ok = p_d > p_a and s_d > s_a
    record(5, ok, f"tremor 2 wavelengths: avg30 {p_a:.2f} dB / SSIM {s_a:.3f}, "
                  f"denoised {p_d:.2f} dB / SSIM {s_d:.3f} (noisy {p_n:.2f} / {s_n:.3f})")


# -- 6 ----------------------------------------------------------------------------------

def test_c06_snr_depth_trend():
    stack = depth_stack()
    prof = snr_depth_profile(stack)
    snr, depth = prof.snr_db, prof.depth_mm
    corr = float(np.corrcoef(depth, snr)[0, 1])
    k = max(1, len(snr) // 20)
    decay = float(snr[:k].mean() - snr[-k:].mean())
    record(6, corr < -0.9 and decay >= 15, f"corr(depth, SNR) {corr:.3f} (< -0.9), decay {decay:.1f} dB (>= 15)")


# -- 7 ----------------------------------------------------------------------------------

def test_c07_parameter_count():
    n = nn.param_count(nn.UNetConfig())
    record(7, 1.03e6 <= n <= 1.13e6, f"param_count {n} in [1.03e6, 1.13e6]")


# -- 8 ----------------------------------------------------------------------------------

def _brute_psnr(a, b):
    s = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        s += (x - y) ** 2
    return 10 * math.log10(1.0 / (s / a.size))


def _brute_nrmse(a, b):
    s = 0.0
    flat = a.ravel().tolist()
    for x, y in zip(flat, b.ravel().tolist()):
        s += (x - y) ** 2
    return math.sqrt(s / a.size) / (max(flat) - min(flat))


def _brute_ssim(a, b, size=11, sigma=1.5):
    r = (size - 1) // 2
    g = [math.exp(-((i - r) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    tot = sum(gi * gj for gi in g for gj in g)
    w = [[gi * gj / tot for gj in g] for gi in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    al, bl = a.tolist(), b.tolist()
    acc, count = 0.0, 0
    for i in range(len(al) - size + 1):
        for j in range(len(al[0]) - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(size):
                ra, rb, wu = al[i + u], bl[i + u], w[u]
                for v in range(size):
                    x, y, k = ra[j + v], rb[j + v], wu[v]
                    mx += k * x
                    my += k * y
                    sxx += k * x * x
                    syy += k * y * y
                    sxy += k * x * y
            sxx -= mx * mx
            syy -= my * my
            sxy -= mx * my
            acc += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
            count += 1
    return acc / count


def test_c08_metric_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        a, b = rng.random((32, 32)), rng.random((32, 32))
        worst = max(worst, abs(psnr(a, b) - _brute_psnr(a, b)), abs(nrmse(a, b) - _brute_nrmse(a, b)),
                    abs(ssim(a, b) - _brute_ssim(a, b)))
    stack = PatchSetup(noise_rel=NOISE_REL).stack(seed=800, n=30)
    clean = stack.clean.samples.astype(np.float64)
    peak = float(np.abs(clean).max())
    base = psnr(clean, stack.frames[0].samples, peak)
    gaps = {k: psnr(clean, average_frames(stack, k).samples, peak) - base - 10 * math.log10(k)
            for k in (4, 16, 30)}
    ok = worst < 1e-9 and all(abs(v) <= 1.5 for v in gaps.values())
    record(8, ok, f"max |metric - brute force| {worst:.1e} (< 1e-9); averaging gain minus 10log10(k): "
                  + ", ".join(f"k={k}: {v:+.2f} dB" for k, v in gaps.items()) + " (|.| <= 1.5)")


# -- 9 ----------------------------------------------------------------------------------

def test_c09_pair_combinatorics():
    counts_ok = all(len(t.enumerate_pairs(n, "unordered")) == n * (n - 1) // 2
                    and len(t.enumerate_pairs(n, "ordered")) == n * (n - 1) for n in range(2, 65))
    train, val = t.build_dataset([10] * 30, t.TrainConfig(pair_mode="unordered", split_fraction=0.9))
    ok = counts_ok and (len(train), len(val)) == (1215, 135)
    record(9, ok, f"pair counts n=2..64 {'exact' if counts_ok else 'WRONG'}; "
                  f"{len(train) + len(val)} pairs split {len(train)}/{len(val)}")


# -- 10 ---------------------------------------------------------------------------------

def _pipeline(root):
    sim, tr, dn = root / "sim", root / "train", root / "denoise"
    assert cli.run(["simulate", "--scene", "patch", "--media", "2", "--frames", "4",
                    "--patch-size", "32", "--seed", "5", "--out", str(sim)]) == 0
    assert cli.run(["train", str(sim / "medium0000.rfc"), str(sim / "medium0001.rfc"), "--epochs", "2",
                    "--base-channels", "4", "--depth", "3", "--seed", "5", "--out", str(tr)]) == 0
    assert cli.run(["denoise", "--checkpoint", str(tr / "best.n2n"), "--input", str(sim / "medium0001.rfc"),
                    "--frame", "1", "--out", str(dn)]) == 0
    names = ["sim/medium0000.rfc", "sim/medium0000.rfc.f32", "sim/medium0000.clean",
             "sim/medium0000.clean.f32", "sim/medium0001.rfc", "sim/medium0001.rfc.f32",
             "train/best.n2n", "denoise/denoised.rfc", "denoise/denoised.rfc.f32", "denoise/denoised.pgm"]
    return {n: (root / n).read_bytes() for n in names}


def test_c10_reproducible_pipeline(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differ = [n for n in a if a[n] != b[n]]
    record(10, not differ, f"{len(a)} files compared, byte-identical" if not differ
           else f"differing files: {differ}")
