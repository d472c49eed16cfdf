"""Noise2Noise pairing, dataset splits and the training loop.

Each pair feeds one noisy frame of a medium as input and another noisy frame
of the same medium as target. With an L2 loss and zero-mean, frame-independent
noise, the minimiser of the expected loss is the clean frame.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from n2nus import nn_core as nn
from n2nus.nn_core import ModelParams, OptimizerState, TrainingError, UNet, UNetConfig
from n2nus.rf_sim import FrameKind, FrameStack, RFFrame

log = logging.getLogger(__name__)

PAIR_MODES = ("unordered", "ordered")
NORMALIZATIONS = ("global_max_abs", "none")
SPLITS = ("pair", "medium")


class PairIndex(NamedTuple):
    medium: int
    input_frame: int
    target_frame: int


def enumerate_pairs(n: int, mode: str = "ordered", medium: int = 0) -> list:
    """All (input, target) frame pairs of one medium in lexicographic order.

    ``unordered`` gives the n(n-1)/2 pairs with i < j, ``ordered`` the n(n-1)
    pairs in both directions.
    """
    if n < 2:
        raise ValueError("pairing needs at least 2 frames")
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode {mode!r}")
    if mode == "unordered":
        return [PairIndex(medium, i, j) for i in range(n) for j in range(i + 1, n)]
    return [PairIndex(medium, i, j) for i in range(n) for j in range(n) if i != j]


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epsilon: float = 1e-8
    seed: int = 0
    pair_mode: str = "ordered"
    normalization: str = "global_max_abs"
    split_fraction: float = 0.9
    split_by: str = "pair"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"unknown pair_mode {self.pair_mode!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.split_by not in SPLITS:
            raise ValueError(f"unknown split_by {self.split_by!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def split_counts(total: int, fraction: float) -> tuple:
    """(train, validation) sizes: validation is floored, at least one train item."""
    n_val = int(math.floor(total * (1.0 - fraction) + 1e-9))
    n_val = min(n_val, total - 1) if total >= 1 else 0
    return total - n_val, n_val


def build_dataset(stacks: Sequence, config: TrainConfig) -> tuple:
    """Pool pairs of every stack, shuffle with ``config.seed`` and split.

    ``split_by="medium"`` keeps all pairs of a medium on one side instead.
    ``stacks`` may be :class:`FrameStack` objects or plain frame counts.
    """
    if len(stacks) == 0:
        raise ValueError("no frame stacks given")
    sizes = [s if isinstance(s, (int, np.integer)) else len(s) for s in stacks]
    rng = np.random.default_rng(config.seed)
    if config.split_by == "pair":
        pairs = [p for m, n in enumerate(sizes) for p in enumerate_pairs(n, config.pair_mode, m)]
        order = rng.permutation(len(pairs))
        n_train, _ = split_counts(len(pairs), config.split_fraction)
        shuffled = [pairs[i] for i in order]
        return shuffled[:n_train], shuffled[n_train:]
    media = rng.permutation(len(sizes))
    n_train, _ = split_counts(len(sizes), config.split_fraction)
    train = [p for m in sorted(media[:n_train]) for p in enumerate_pairs(sizes[m], config.pair_mode, int(m))]
    val = [p for m in sorted(media[n_train:]) for p in enumerate_pairs(sizes[m], config.pair_mode, int(m))]
    return train, val


def normalize_rf(stack: FrameStack, mode: str = "global_max_abs") -> tuple:
    """Scale a stack by one shared factor; returns ``(stack, scale)``.

    ``global_max_abs`` divides every frame (and the clean reference) by the
    largest magnitude over the frames. An all-zero stack keeps scale 1.
    """
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}")
    scale = 1.0
    if mode == "global_max_abs":
        m = float(np.abs(stack.as_array()).max())
        scale = m if m > 0 else 1.0
    if scale == 1.0:
        return stack, 1.0
    frames = [f.with_samples(f.samples / scale, f.noise_sigma / scale) for f in stack.frames]
    clean = None
    if stack.clean is not None:
        clean = stack.clean.with_samples(stack.clean.samples / scale)
    return FrameStack(frames, clean, stack.medium_id, list(stack.shifts)), scale


def denormalize(samples, scale: float) -> np.ndarray:
    return np.asarray(samples) * scale


def reflect_pad(img: np.ndarray, multiple: int) -> tuple:
    """Pad the last two axes reflectively up to a multiple; returns ``(padded, (h, w))``."""
    h, w = img.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(img, pad, mode=mode), (h, w)


@dataclass
class Checkpoint:
    epoch: int
    params: ModelParams
    optimizer: OptimizerState
    validation_loss: float
    seed: int = 0
    normalization: str = "global_max_abs"
    kind: str = FrameKind.BEAMFORMED.value
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> UNetConfig:
        return self.params.config


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def val_losses(self) -> list:
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self) -> list:
        return [r.train_loss for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,seconds"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"


class PairData:
    """Normalised frames of several stacks, indexed by :class:`PairIndex`."""

    def __init__(self, stacks: Sequence[FrameStack], normalization: str = "global_max_abs",
                 multiple: int = 1, dtype=np.float32):
        if len(stacks) == 0:
            raise ValueError("no frame stacks given")
        kinds = {s.kind for s in stacks}
        if len(kinds) != 1:
            raise ValueError("all stacks must hold the same kind of frames")
        self.kind = kinds.pop()
        self.frames = []
        self.scales = []
        self.shape = None
        for m, s in enumerate(stacks):
            if len(s) < 2:
                raise ValueError(f"stack {m} ({s.medium_id}) has fewer than 2 frames")
            ns, scale = normalize_rf(s, normalization)
            arr = ns.as_array().astype(dtype)
            arr, orig = reflect_pad(arr, multiple)
            if self.shape is None:
                self.shape = orig
            elif orig != self.shape:
                raise ValueError(f"stack {m} ({s.medium_id}) has frame shape {orig}, expected {self.shape}")
            self.frames.append(arr)
            self.scales.append(scale)

    def batch(self, pairs: Sequence[PairIndex]) -> tuple:
        x = np.stack([self.frames[p.medium][p.input_frame] for p in pairs])[:, None]
        y = np.stack([self.frames[p.medium][p.target_frame] for p in pairs])[:, None]
        return x, y


def _cropped_loss(pred, target, shape):
    h, w = shape
    loss, g = nn.mse_loss(pred[..., :h, :w], target[..., :h, :w])
    if g.shape != pred.shape:
        full = np.zeros_like(pred)
        full[..., :h, :w] = g
        g = full
    return loss, g


def evaluate_loss(params: ModelParams, data: PairData, pairs: Sequence[PairIndex],
                  batch_size: int = 8) -> float:
    """Mean per-pixel L2 loss over ``pairs`` (batch-size weighted)."""
    if len(pairs) == 0:
        return math.nan
    total = 0.0
    for b in range(0, len(pairs), batch_size):
        chunk = pairs[b:b + batch_size]
        x, y = data.batch(chunk)
        pred = nn.unet_forward(params, x)
        loss, _ = _cropped_loss(pred, y, data.shape)
        total += loss * len(chunk)
    return total / len(pairs)


def train(params: ModelParams, data: PairData, train_pairs: Sequence[PairIndex],
          val_pairs: Sequence[PairIndex], config: TrainConfig,
          checkpoint_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> tuple:
    """Minimise the Noise2Noise L2 objective with AdamW.

    Returns ``(best_checkpoint, log)``. The best checkpoint has the lowest
    validation loss (earliest epoch on ties); with an empty validation set the
    training loss is used for selection. ``epochs=0`` returns the initial
    parameters as epoch 0. When ``checkpoint_dir`` is given every epoch is
    written there as ``epoch_XXXX.n2n``.
    """
    from n2nus.io import save_checkpoint  # local: io imports this module

    if len(train_pairs) == 0:
        raise ValueError("no training pairs")
    params = params.copy()
    net = UNet(params)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay, epsilon=config.epsilon)
    opt.ensure_buffers(params)
    rng = np.random.default_rng([config.seed, 1])
    train_pairs = list(train_pairs)
    val_pairs = list(val_pairs)
    bs = config.batch_size

    def snapshot(epoch, score):
        return Checkpoint(epoch, params.copy(), opt.copy(), score, config.seed,
                          config.normalization, data.kind.value)

    logbook = TrainLog()
    if config.epochs == 0:
        score = evaluate_loss(params, data, val_pairs or train_pairs, bs)
        return snapshot(0, score), logbook

    best = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_pairs))
        total = 0.0
        for bi, b in enumerate(range(0, len(order), bs)):
            chunk = [train_pairs[i] for i in order[b:b + bs]]
            x, y = data.batch(chunk)
            pred = net.forward(x)
            loss, g = _cropped_loss(pred, y, data.shape)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi} "
                                    f"(pairs {[tuple(p) for p in chunk]})")
            net.backward(g)
            try:
                nn.adamw_step(opt, params)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {bi}") from None
            total += loss * len(chunk)
        train_loss = total / len(train_pairs)
        val_loss = evaluate_loss(params, data, val_pairs, bs) if val_pairs else math.nan
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
        logbook.records.append(rec)
        score = val_loss if val_pairs else train_loss
        if not math.isfinite(score):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        ckpt = snapshot(epoch, score)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:04d}.n2n", ckpt)
        if best is None or score < best.validation_loss:
            best = ckpt
        log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, train_loss, val_loss, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
    return best, logbook


def denoise(checkpoint: Checkpoint, frame: RFFrame) -> RFFrame:
    """Single-frame inference with the checkpoint's normalisation convention.

    The frame is scaled by its own max magnitude (``global_max_abs``), padded
    reflectively to the network's size multiple, passed through the U-Net and
    mapped back to the input scale and shape.
    """
    if frame.kind.value != checkpoint.kind:
        raise ValueError(f"checkpoint was trained on {checkpoint.kind} data, got {frame.kind.value}")
    out = denoise_array(checkpoint, frame.samples)
    return frame.with_samples(out, noise_sigma=0.0)


def denoise_array(checkpoint: Checkpoint, images) -> np.ndarray:
    """Denoise one ``(H, W)`` image or a batch ``(B, H, W)``, each scaled independently."""
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("expected (H, W) or (B, H, W) input")
    if checkpoint.normalization == "global_max_abs":
        scales = np.abs(arr).max(axis=(1, 2))
        scales[scales == 0] = 1.0
    else:
        scales = np.ones(arr.shape[0], dtype=np.float32)
    x = arr / scales[:, None, None]
    x, (h, w) = reflect_pad(x, checkpoint.config.size_multiple)
    y = nn.unet_forward(checkpoint.params, x[:, None])[:, 0, :h, :w]
    y = y * scales[:, None, None]
    return y[0] if single else y
