"""Numpy U-Net with hand-written backward passes and AdamW.

Public layer functions take and return ``(N, C, H, W)`` arrays. Internally the
network keeps activations channel-major, ``(C, N, H, W)``, so that every 3x3
convolution is a single matrix product against a contiguous column buffer
without transposes.

Architecture (``base_channels=b``, ``depth=D``)::

    encoder level l < D-1 : conv3x3(., b*2^l) -> relu -> conv3x3 -> relu -> maxpool
    bottom level D-1      : conv3x3(., b*2^(D-2)) -> relu -> conv3x3 -> relu
    decoder level l       : upsample2x (nearest) -> concat(skip_l, up)
                            -> conv3x3(., b*2^l) -> relu -> conv3x3(., b*2^(l-1)) -> relu
                            (level 0 keeps b output channels)
    head                  : conv1x1(b, out_channels), linear

With the defaults (b=16, D=5) this is 1,079,537 parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class TrainingError(RuntimeError):
    """Raised when optimisation produces non-finite values."""


# ---------------------------------------------------------------------------
# configuration and parameter storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    depth: int = 5
    kernel_size: int = 3

    def __post_init__(self):
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are supported")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        for name in ("in_channels", "out_channels", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def widths(self) -> list:
        """Feature width of each resolution level (the deepest is halved)."""
        w = [self.base_channels * 2 ** level for level in range(self.depth)]
        if self.depth > 1:
            w[-1] = self.base_channels * 2 ** (self.depth - 2)
        return w

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "base_channels": self.base_channels, "depth": self.depth,
                "kernel_size": self.kernel_size}


def layer_specs(config: UNetConfig) -> list:
    """Convolutions in storage order as ``(name, c_in, c_out, k)``."""
    w = config.widths
    specs = []
    c = config.in_channels
    for level in range(config.depth):
        specs.append((f"enc{level}a", c, w[level], 3))
        specs.append((f"enc{level}b", w[level], w[level], 3))
        c = w[level]
    for level in range(config.depth - 2, -1, -1):
        out = w[level - 1] if level > 0 else w[0]
        specs.append((f"dec{level}a", c + w[level], w[level], 3))
        specs.append((f"dec{level}b", w[level], out, 3))
        c = out
    specs.append(("head", c, config.out_channels, 1))
    return specs


def param_count(config: UNetConfig) -> int:
    """Exact number of weights plus biases."""
    return sum(ci * co * k * k + co for _, ci, co, k in layer_specs(config))


class ModelParams:
    """Flat parameter and gradient buffers with per-layer views.

    Layout: for each layer of :func:`layer_specs` in order, the weight
    ``(c_out, c_in, k, k)`` followed by the bias ``(c_out,)``.
    """

    def __init__(self, config: UNetConfig, data: Optional[np.ndarray] = None,
                 dtype=np.float32):
        self.config = config
        n = param_count(config)
        if data is None:
            data = np.zeros(n, dtype=dtype)
        data = np.ascontiguousarray(data)
        if data.ndim != 1 or data.shape[0] != n:
            raise ValueError(f"expected {n} parameters, got {data.shape}")
        self.data = data
        self.grad = np.zeros_like(data)
        self.weights, self.biases = {}, {}
        self.grad_weights, self.grad_biases = {}, {}
        offset = 0
        for name, ci, co, k in layer_specs(config):
            nw = co * ci * k * k
            self.weights[name] = data[offset:offset + nw].reshape(co, ci, k, k)
            self.grad_weights[name] = self.grad[offset:offset + nw].reshape(co, ci, k, k)
            offset += nw
            self.biases[name] = data[offset:offset + co]
            self.grad_biases[name] = self.grad[offset:offset + co]
            offset += co

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.data.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.data.astype(dtype))

    @classmethod
    def initialize(cls, config: UNetConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        """Kaiming-uniform (fan-in) weights, zero biases.

        Layers followed by ReLU use bound ``sqrt(6 / fan_in)``; the linear head
        uses ``sqrt(3 / fan_in)``.
        """
        params = cls(config, dtype=dtype)
        rng = np.random.default_rng(seed)
        for name, ci, co, k in layer_specs(config):
            fan_in = ci * k * k
            gain = 3.0 if name == "head" else 6.0
            bound = math.sqrt(gain / fan_in)
            params.weights[name][...] = rng.uniform(-bound, bound, (co, ci, k, k))
        return params


# ---------------------------------------------------------------------------
# channel-major kernels, arrays are (C, N, H, W)
# ---------------------------------------------------------------------------

def _im2col(x):
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, n, h, w), dtype=x.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, k] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(dcols, shape):
    c, n, h, w = shape
    dcols = dcols.reshape(c, 9, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, :, i:i + h, j:j + w] += dcols[:, k]
    return dxp[:, :, 1:-1, 1:-1]


def _conv3_fwd(x, weight, bias):
    c, n, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1] != c:
        raise ValueError(f"conv expects {weight.shape[1]} input channels, got {c}")
    cols = _im2col(x)
    y = weight.reshape(co, -1) @ cols
    y += bias[:, None]
    return y.reshape(co, n, h, w), cols


def _conv3_bwd(g, cols, weight, x_shape, need_input_grad=True):
    co = weight.shape[0]
    g2 = g.reshape(co, -1)
    gw = (g2 @ cols.T).reshape(weight.shape)
    gb = g2.sum(axis=1)
    gx = None
    if need_input_grad:
        gx = _col2im(weight.reshape(co, -1).T @ g2, x_shape)
    return gx, gw, gb


def _conv1_fwd(x, weight, bias):
    c, n, h, w = x.shape
    co = weight.shape[0]
    y = weight.reshape(co, c) @ x.reshape(c, -1)
    y += bias[:, None]
    return y.reshape(co, n, h, w)


def _conv1_bwd(g, x, weight):
    co, ci = weight.shape[:2]
    g2 = g.reshape(co, -1)
    x2 = x.reshape(ci, -1)
    gw = (g2 @ x2.T).reshape(weight.shape)
    gb = g2.sum(axis=1)
    gx = (weight.reshape(co, ci).T @ g2).reshape(x.shape)
    return gx, gw, gb


def _pool_fwd(x):
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pooling needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(c, n, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _pool_bwd(g, idx):
    c, n, h2, w2 = g.shape
    blocks = np.zeros((c, n, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(c, n, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(c, n, 2 * h2, 2 * w2)


def _up_fwd(x):
    c, n, h, w = x.shape
    y = np.broadcast_to(x[:, :, :, None, :, None], (c, n, h, 2, w, 2))
    return y.reshape(c, n, 2 * h, 2 * w)


def _up_bwd(g):
    c, n, h, w = g.shape
    return g.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# public layer API, arrays are (N, C, H, W)
# ---------------------------------------------------------------------------

def _to_cm(x):
    return np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2, 3))


def _to_nc(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


@dataclass
class ConvCache:
    input_shape: tuple
    cols: np.ndarray
    weight: np.ndarray


def conv2d_forward(x, weight, bias):
    """3x3 stride-1 cross-correlation with zero 'same' padding.

    Returns ``(y, cache)``; ``cache`` feeds :func:`conv2d_backward`.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 4:
        raise ValueError("conv2d input must be (N, C, H, W)")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError("conv2d weight must be (C_out, C_in, 3, 3)")
    if bias.shape != (weight.shape[0],):
        raise ValueError("conv2d bias must be (C_out,)")
    xc = _to_cm(x)
    y, cols = _conv3_fwd(xc, weight, bias)
    return _to_nc(y), ConvCache(xc.shape, cols, weight)


def conv2d_backward(grad_out, cache: Optional[ConvCache]):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of :func:`conv2d_forward`."""
    if cache is None:
        raise RuntimeError("conv2d_backward called without a forward cache")
    g = _to_cm(grad_out)
    gx, gw, gb = _conv3_bwd(g, cache.cols, cache.weight, cache.input_shape)
    return _to_nc(gx), gw, gb


def relu_forward(x):
    x = np.asarray(x)
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(grad_out, mask):
    return np.where(mask, grad_out, 0).astype(np.asarray(grad_out).dtype)


def maxpool2x2_forward(x):
    """2x2 max-pooling; returns ``(y, argmax)`` with argmax in 0..3 per window."""
    y, idx = _pool_fwd(_to_cm(x))
    return _to_nc(y), idx


def maxpool2x2_backward(grad_out, idx):
    return _to_nc(_pool_bwd(_to_cm(grad_out), idx))


def upsample2x2_forward(x):
    return _to_nc(_up_fwd(_to_cm(x)))


def upsample2x2_backward(grad_out):
    return _to_nc(_up_bwd(_to_cm(grad_out)))


def concat_forward(skip, up):
    if skip.shape[0] != up.shape[0] or skip.shape[2:] != up.shape[2:]:
        raise ValueError("concat needs equal batch and spatial dims")
    return np.concatenate([skip, up], axis=1)


def concat_backward(grad_out, skip_channels):
    return grad_out[:, :skip_channels], grad_out[:, skip_channels:]


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class UNet:
    """U-Net forward/backward over a :class:`ModelParams` instance.

    ``forward`` caches what ``backward`` needs; ``backward`` accumulates into
    ``params.grad`` (overwriting it) and returns the input gradient.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.config = params.config
        self._cache = None

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4:
            raise ValueError("U-Net input must be (N, C, H, W)")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        m = self.config.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {m}")
        return x.astype(self.params.dtype, copy=False)

    def forward(self, x, keep_cache: bool = True):
        x = self._check_input(x)
        p = self.params
        depth = self.config.depth
        cache = {}
        h = _to_cm(x)
        skips = []
        for level in range(depth):
            if level > 0:
                h, cache[f"pool{level}"] = _pool_fwd(h)
            for part in "ab":
                name = f"enc{level}{part}"
                shape = h.shape
                h, cols = _conv3_fwd(h, p.weights[name], p.biases[name])
                np.maximum(h, 0, out=h)
                cache[name] = (shape, cols if keep_cache else None, h)
            skips.append(h)
        for level in range(depth - 2, -1, -1):
            skip = skips[level]
            h = np.concatenate([skip, _up_fwd(h)], axis=0)
            cache[f"cat{level}"] = skip.shape[0]
            for part in "ab":
                name = f"dec{level}{part}"
                shape = h.shape
                h, cols = _conv3_fwd(h, p.weights[name], p.biases[name])
                np.maximum(h, 0, out=h)
                cache[name] = (shape, cols if keep_cache else None, h)
        cache["head_in"] = h
        y = _conv1_fwd(h, p.weights["head"], p.biases["head"])
        self._cache = cache if keep_cache else None
        return _to_nc(y)

    __call__ = forward

    def backward(self, grad_out, need_input_grad: bool = False):
        if self._cache is None:
            raise RuntimeError("backward called before a caching forward pass")
        cache = self._cache
        p = self.params
        depth = self.config.depth
        p.grad[...] = 0
        g = _to_cm(np.asarray(grad_out, dtype=p.dtype))
        g, gw, gb = _conv1_bwd(g, cache["head_in"], p.weights["head"])
        p.grad_weights["head"][...] = gw
        p.grad_biases["head"][...] = gb

        skip_grads = [None] * depth
        g = self._decoder_bwd(g, skip_grads)
        for level in range(depth - 1, -1, -1):
            if skip_grads[level] is not None:
                g = g + skip_grads[level]
            for part in "ba":
                name = f"enc{level}{part}"
                last = level == 0 and part == "a"
                g = self._conv_relu_bwd(g, name, need_input=need_input_grad or not last)
            if level > 0:
                g = _pool_bwd(g, cache[f"pool{level}"])
        self._cache = None
        return _to_nc(g) if g is not None else None

    def _decoder_bwd(self, g, skip_grads):
        cache = self._cache
        depth = self.config.depth
        for level in range(0, depth - 1):
            for part in "ba":
                g = self._conv_relu_bwd(g, f"dec{level}{part}", need_input=True)
            n_skip = cache[f"cat{level}"]
            skip_grads[level] = g[:n_skip]
            g = _up_bwd(g[n_skip:])
        return g

    def _conv_relu_bwd(self, g, name, need_input=True):
        shape, cols, out = self._cache[name]
        g = np.where(out > 0, g, 0).astype(g.dtype, copy=False)
        p = self.params
        gx, gw, gb = _conv3_bwd(g, cols, p.weights[name], shape, need_input_grad=need_input)
        p.grad_weights[name][...] = gw
        p.grad_biases[name][...] = gb
        return gx


def unet_forward(params: ModelParams, x):
    """Inference pass; no cache is kept."""
    return UNet(params).forward(x, keep_cache=False)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def ensure_buffers(self, params: ModelParams):
        if self.m is None:
            self.m = np.zeros_like(params.data)
            self.v = np.zeros_like(params.data)
        if self.m.shape != params.data.shape or self.v.shape != params.data.shape:
            raise ValueError("optimizer buffers do not match the parameters")

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.weight_decay, self.beta1, self.beta2, self.epsilon,
                              self.step,
                              None if self.m is None else self.m.copy(),
                              None if self.v is None else self.v.copy())


def adamw_step(state: OptimizerState, params: ModelParams, grads=None):
    """One AdamW update in place, decoupled decay applied to the pre-step weights."""
    grads = params.grad if grads is None else np.asarray(grads)
    if grads.shape != params.data.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient")
    state.ensure_buffers(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * np.square(grads)
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    update = m_hat / (np.sqrt(v_hat) + state.epsilon)
    if state.weight_decay:
        update += state.weight_decay * params.data
    params.data -= (state.lr * update).astype(params.data.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(params: ModelParams, x, target=None, epsilon: float = 1e-5,
               n_samples: int = 200, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central finite differences.

    ``n_samples`` parameter indices are drawn without replacement (all of
    them if the model is smaller). The relative error of one parameter is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    params = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    net = UNet(params)
    rng = np.random.default_rng(seed)
    if target is None:
        out_shape = (x.shape[0], params.config.out_channels) + x.shape[2:]
        target = rng.standard_normal(out_shape)
    target = np.asarray(target, dtype=np.float64)

    def loss_at():
        return mse_loss(net.forward(x, keep_cache=False), target)[0]

    _, g = mse_loss(net.forward(x), target)
    net.backward(g)
    analytic = params.grad.copy()
    idx = rng.choice(params.size, size=min(n_samples, params.size), replace=False)
    worst = 0.0
    for i in idx:
        orig = params.data[i]
        params.data[i] = orig + epsilon
        lp = loss_at()
        params.data[i] = orig - epsilon
        lm = loss_at()
        params.data[i] = orig
        numeric = (lp - lm) / (2 * epsilon)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
