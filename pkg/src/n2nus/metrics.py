"""Image quality metrics, frame-averaging baselines and SNR-versus-depth profiles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import convolve2d

from n2nus._validation import check_image_pair, check_positive
from n2nus.rf_sim import FrameStack, RFFrame, envelope, to_bmode

METHOD_ROWS = ("noisy input", "averaging frames", "proposed method")


def psnr(reference, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    check_positive(peak, "peak")
    ref, tst = check_image_pair(reference, test)
    mse = np.mean((ref - tst) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def nrmse(reference, test) -> float:
    """Root mean square error divided by the dynamic range of ``reference``."""
    ref, tst = check_image_pair(reference, test)
    span = ref.max() - ref.min()
    if span == 0:
        raise ValueError("nrmse needs a non-constant reference")
    return float(np.sqrt(np.mean((ref - tst) ** 2)) / span)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(reference, test, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Local SSIM over all full windows ('valid' placement)."""
    ref, tst = check_image_pair(reference, test)
    if ref.ndim != 2 or min(ref.shape) < window_size:
        raise ValueError(f"ssim needs 2-D images at least {window_size}x{window_size}")
    w = gaussian_window(window_size, sigma)

    def filt(a):
        return convolve2d(a, w[::-1, ::-1], mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = filt(ref), filt(tst)
    sxx = filt(ref * ref) - mu_x ** 2
    syy = filt(tst * tst) - mu_y ** 2
    sxy = filt(ref * tst) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, test, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)."""
    return float(np.mean(ssim_map(reference, test, window_size, sigma, k1, k2, data_range)))


def _frames_array(stack) -> np.ndarray:
    if isinstance(stack, FrameStack):
        return stack.as_array().astype(np.float64)
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("expected a FrameStack or an (n, rows, cols) array")
    return arr


def average_frames(stack: FrameStack, k: Optional[int] = None) -> RFFrame:
    """Pixelwise mean of the first ``k`` frames, misaligned or not."""
    n = len(stack)
    k = n if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the stack size {n}")
    frames = stack.as_array()[:k].astype(np.float64)
    first = stack.frames[0]
    return first.with_samples(frames.mean(axis=0), noise_sigma=first.noise_sigma / math.sqrt(k))


def ground_truth_from_stack(stack: FrameStack, k: Optional[int] = None, exact: bool = False) -> np.ndarray:
    """Mean of the first ``k`` frames, or the simulator's clean frame if ``exact``."""
    if exact:
        if stack.clean is None:
            raise ValueError("stack carries no clean reference")
        return stack.clean.samples.astype(np.float64)
    k = len(stack) if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(stack):
        raise ValueError(f"k={k} exceeds the stack size {len(stack)}")
    return stack.as_array()[:k].astype(np.float64).mean(axis=0)


@dataclass
class SnrProfile:
    depth_index: np.ndarray
    depth_mm: np.ndarray
    snr_db: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth_index", "depth_mm", "snr_db"])
        for i, d, s in zip(self.depth_index, self.depth_mm, self.snr_db):
            w.writerow([int(i), f"{d:.6f}", _fmt(s)])
        return buf.getvalue()


def snr_depth_profile(stack) -> SnrProfile:
    """Per-depth SNR (dB) estimated from the frame ensemble.

    Signal power is the mean square of the ensemble-mean trace over lines;
    noise power is the unbiased (n/(n-1)) mean squared deviation of the frames
    from that mean. Rows without noise get ``inf``.
    """
    frames = _frames_array(stack)
    n = frames.shape[0]
    if n < 2:
        raise ValueError("snr_depth_profile needs at least 2 frames")
    mean = frames.mean(axis=0)
    signal = np.mean(mean ** 2, axis=1)
    noise = np.mean((frames - mean) ** 2, axis=(0, 2)) * n / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(signal / noise)
    snr = np.where(noise == 0, np.inf, snr)
    rows = frames.shape[1]
    idx = np.arange(rows)
    if isinstance(stack, FrameStack) and stack.frames[0].grid is not None:
        depth_mm = stack.frames[0].grid.z * 1e3
    elif isinstance(stack, FrameStack):
        p = stack.frames[0].probe
        depth_mm = idx * p.sound_speed / (2 * p.sampling_freq) * 1e3
    else:
        depth_mm = idx.astype(np.float64)
    return SnrProfile(idx, depth_mm, snr)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


@dataclass
class MetricRow:
    method: str
    psnr_db: float
    nrmse: float
    ssim: float


@dataclass
class MetricReport:
    rows: list
    dataset_id: str = ""
    ground_truth: str = "simulator clean frame"
    domain: str = "bmode"
    extras: dict = field(default_factory=dict)

    def row(self, method: str) -> MetricRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "psnr_db", "nrmse", "ssim"])
        for r in self.rows:
            w.writerow([r.method, _fmt(r.psnr_db), _fmt(r.nrmse), _fmt(r.ssim)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"dataset: {self.dataset_id or '-'}   ground truth: {self.ground_truth}   domain: {self.domain}"
        lines = [head, f"{'method':<18}{'PSNR [dB]':>11}{'NRMSE':>10}{'SSIM':>8}"]
        for r in self.rows:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.2f}"
            lines.append(f"{r.method:<18}{p:>11}{r.nrmse:>10.4f}{r.ssim:>8.3f}")
        return "\n".join(lines) + "\n"


def _samples(img):
    return img.samples if isinstance(img, RFFrame) else np.asarray(img)


def compare_methods(clean, noisy, averaged, denoised, dynamic_range_db: float = 60.0,
                    domain: str = "bmode", dataset_id: str = "") -> MetricReport:
    """Table of PSNR / NRMSE / SSIM for noisy input, frame averaging and the denoiser.

    In the default ``bmode`` domain every image is log-compressed with the
    clean image's envelope maximum as the shared display gain, so metrics see
    the same 0 dB level. ``domain="rf"`` compares raw samples with the clean
    frame's peak absolute value as PSNR peak and SSIM range.
    """
    imgs = [_samples(x) for x in (clean, noisy, averaged, denoised)]
    for other in imgs[1:]:
        check_image_pair(imgs[0], other)
    if domain == "bmode":
        ref_max = envelope(imgs[0]).max()
        conv = [to_bmode(x, dynamic_range_db, ref_max=ref_max).pixels for x in imgs]
        peak = 1.0
    elif domain == "rf":
        conv = [np.asarray(x, dtype=np.float64) for x in imgs]
        peak = float(np.abs(conv[0]).max()) or 1.0
    else:
        raise ValueError(f"unknown domain {domain!r}")
    ref = conv[0]
    rows = []
    for name, img in zip(METHOD_ROWS, conv[1:]):
        rng = peak if domain == "bmode" else 2 * peak
        rows.append(MetricRow(name, psnr(ref, img, peak), nrmse(ref, img),
                              ssim(ref, img, data_range=rng)))
    return MetricReport(rows, dataset_id, domain=domain)
