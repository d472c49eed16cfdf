"""scikit-learn style wrappers around the Noise2Noise denoiser.

``X`` for :meth:`Noise2NoiseDenoiser.fit` is a set of noisy frame stacks,
either a 4-D array ``(media, frames, rows, cols)`` or a sequence of
:class:`~n2nus.rf_sim.FrameStack`. ``transform`` takes single frames,
``(rows, cols)`` or ``(n, rows, cols)``, and returns denoised frames of the
same shape.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from n2nus import n2n_train as t
from n2nus.metrics import psnr
from n2nus.nn_core import ModelParams, UNetConfig
from n2nus.rf_sim import FrameKind, FrameStack, ProbeConfig, RFFrame

_PLACEHOLDER_PROBE = ProbeConfig()


def check_stacks(X) -> list:
    """Coerce ``X`` to a list of :class:`FrameStack` and validate it."""
    if isinstance(X, FrameStack):
        X = [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(s, FrameStack) for s in X):
        return list(X)
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (media, frames, rows, cols) stacks, got shape {arr.shape}")
    if arr.shape[1] < 2:
        raise ValueError("each medium needs at least 2 frames")
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains non-finite values")
    return [FrameStack([RFFrame(f, FrameKind.BEAMFORMED, _PLACEHOLDER_PROBE) for f in m], None, f"medium{i}")
            for i, m in enumerate(arr)]


def check_frames(X) -> tuple:
    """Return ``(array (n, rows, cols), was_single)`` for one frame or a batch."""
    arr = np.asarray(X.samples if isinstance(X, RFFrame) else X, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (rows, cols) or (n, rows, cols) frames, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains non-finite values")
    return arr, single


class Noise2NoiseDenoiser(BaseEstimator, TransformerMixin):
    """U-Net trained on pairs of independent noisy frames of the same medium.

    No clean data is needed: ``fit`` only sees noisy stacks. After fitting,
    ``checkpoint_`` holds the best-validation weights, ``log_`` the per-epoch
    losses and ``best_epoch_`` the selected epoch.
    """

    def __init__(self, base_channels=16, depth=5, epochs=100, batch_size=8, lr=1e-3,
                 weight_decay=1e-2, pair_mode="ordered", split_fraction=0.9, split_by="pair",
                 normalization="global_max_abs", random_state=0, verbose=False):
        self.base_channels = base_channels
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.pair_mode = pair_mode
        self.split_fraction = split_fraction
        self.split_by = split_by
        self.normalization = normalization
        self.random_state = random_state
        self.verbose = verbose

    def _train_config(self) -> t.TrainConfig:
        return t.TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                             weight_decay=self.weight_decay, seed=self.random_state,
                             pair_mode=self.pair_mode, normalization=self.normalization,
                             split_fraction=self.split_fraction, split_by=self.split_by)

    def fit(self, X, y=None):
        stacks = check_stacks(X)
        config = self._train_config()
        net = UNetConfig(base_channels=self.base_channels, depth=self.depth)
        train_pairs, val_pairs = t.build_dataset(stacks, config)
        data = t.PairData(stacks, config.normalization, net.size_multiple)
        params = ModelParams.initialize(net, seed=self.random_state)
        hook = (lambda r: print(f"epoch {r.epoch} train {r.train_loss:.6g} val {r.val_loss:.6g}")
                if self.verbose else None)
        self.checkpoint_, self.log_ = t.train(params, data, train_pairs, val_pairs, config, on_epoch=hook)
        self.best_epoch_ = self.checkpoint_.epoch
        self.n_pairs_ = (len(train_pairs), len(val_pairs))
        self.frame_shape_ = data.shape
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: t.Checkpoint) -> "Noise2NoiseDenoiser":
        """Wrap an already trained checkpoint (e.g. one loaded from disk)."""
        cfg = checkpoint.config
        est = cls(base_channels=cfg.base_channels, depth=cfg.depth, random_state=checkpoint.seed,
                  normalization=checkpoint.normalization)
        est.checkpoint_ = checkpoint
        est.best_epoch_ = checkpoint.epoch
        return est

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        arr, single = check_frames(X)
        out = t.denoise_array(self.checkpoint_, arr)
        return out[0] if single else out

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of denoised ``X`` against clean ``y``, with ``y``'s peak magnitude."""
        den, _ = check_frames(self.transform(X))
        ref, _ = check_frames(y)
        if ref.shape != den.shape:
            raise ValueError(f"X and y differ in shape: {den.shape} vs {ref.shape}")
        return float(np.mean([psnr(r, d, float(np.abs(r).max()) or 1.0) for r, d in zip(ref, den)]))


class FrameAveraging(BaseEstimator, TransformerMixin):
    """Baseline: pixelwise mean of the first ``n_frames`` frames of each stack.

    ``transform`` maps ``(media, frames, rows, cols)`` to ``(media, rows, cols)``.
    """

    def __init__(self, n_frames=None):
        self.n_frames = n_frames

    def fit(self, X, y=None):
        stacks = check_stacks(X)
        self.n_frames_ = self.n_frames or min(len(s) for s in stacks)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_")
        stacks = check_stacks(X)
        out = []
        for s in stacks:
            if len(s) < self.n_frames_:
                raise ValueError(f"stack {s.medium_id} has {len(s)} frames, need {self.n_frames_}")
            out.append(s.as_array()[: self.n_frames_].astype(np.float64).mean(axis=0))
        return np.stack(out)
