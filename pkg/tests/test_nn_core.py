import numpy as np
import pytest

from n2nus import nn_core as nn
from n2nus.nn_core import ModelParams, OptimizerState, UNet, UNetConfig


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` with respect to every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- convolution -------------------------------------------------------------

def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y, _ = nn.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_allclose(y, x)


def test_conv_single_pixel_dot_product():
    x = np.array([3.0, 4.0]).reshape(1, 2, 1, 1)
    w = np.zeros((1, 2, 3, 3))
    w[0, 0, 1, 1] = 2.0
    w[0, 1, 1, 1] = 5.0
    y, _ = nn.conv2d_forward(x, w, np.array([1.0]))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 27.0


def test_conv_zero_input_gives_bias():
    w = np.random.default_rng(1).standard_normal((4, 2, 3, 3))
    b = np.array([0.5, -1.0, 2.0, 0.0])
    y, _ = nn.conv2d_forward(np.zeros((1, 2, 4, 4)), w, b)
    np.testing.assert_array_equal(y, np.broadcast_to(b[None, :, None, None], y.shape))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    y, _ = nn.conv2d_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    y, cache = nn.conv2d_forward(x, w, np.zeros(3))
    gx, gw, gb = nn.conv2d_backward(np.zeros_like(y), cache)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_requires_cache():
    with pytest.raises(RuntimeError):
        nn.conv2d_backward(np.zeros((1, 1, 2, 2)), None)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    b = rng.standard_normal(1)
    r = rng.standard_normal((1, 1, 4, 4))

    def f():
        return float(np.sum(nn.conv2d_forward(x, w, b)[0] * r))

    y, cache = nn.conv2d_forward(x, w, b)
    gx, gw, gb = nn.conv2d_backward(r, cache)
    assert rel_err(gx, numeric_grad(f, x)) < 1e-4
    assert rel_err(gw, numeric_grad(f, w)) < 1e-4
    assert rel_err(gb, numeric_grad(f, b)) < 1e-4


def test_conv_grad_bias_is_sum_of_grad_out():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 4, 6))
    y, cache = nn.conv2d_forward(x, rng.standard_normal((4, 2, 3, 3)), np.zeros(4))
    g = rng.standard_normal(y.shape)
    _, _, gb = nn.conv2d_backward(g, cache)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


# -- other layers --------------------------------------------------------------

def test_relu():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    y, mask = nn.relu_forward(x)
    np.testing.assert_array_equal(y, [0, 0, 0, 0.5, 3.0])
    np.testing.assert_array_equal(nn.relu_backward(np.ones(5), mask), [0, 0, 0, 1, 1])


def test_maxpool_constant_and_backward():
    x = np.full((2, 3, 4, 6), 1.5)
    y, idx = nn.maxpool2x2_forward(x)
    assert y.shape == (2, 3, 2, 3)
    assert np.all(y == 1.5)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 4, 4))
    r = rng.standard_normal((1, 2, 2, 2))
    y, idx = nn.maxpool2x2_forward(x)
    g = nn.maxpool2x2_backward(r, idx)
    num = numeric_grad(lambda: float(np.sum(nn.maxpool2x2_forward(x)[0] * r)), x)
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_maxpool_odd_dims():
    with pytest.raises(ValueError):
        nn.maxpool2x2_forward(np.zeros((1, 1, 5, 4)))


def test_upsample_forward_backward():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    y = nn.upsample2x2_forward(x)
    np.testing.assert_array_equal(y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    g = nn.upsample2x2_backward(np.ones((1, 1, 4, 4)))
    np.testing.assert_array_equal(g, np.full((1, 1, 2, 2), 4.0))


def test_concat():
    a = np.zeros((2, 3, 4, 4))
    b = np.ones((2, 5, 4, 4))
    y = nn.concat_forward(a, b)
    assert y.shape == (2, 8, 4, 4)
    ga, gb = nn.concat_backward(y, 3)
    assert ga.shape == a.shape and gb.shape == b.shape


# -- loss ------------------------------------------------------------------------

def test_mse_loss_values():
    t = np.random.default_rng(7).standard_normal((2, 1, 4, 4))
    assert nn.mse_loss(t, t)[0] == 0.0
    assert nn.mse_loss(t + 3, t)[0] == pytest.approx(9.0, abs=1e-12)


def test_mse_loss_brute_force():
    rng = np.random.default_rng(8)
    p = rng.standard_normal((2, 1, 5, 3))
    t = rng.standard_normal((2, 1, 5, 3))
    total = 0.0
    for a, b in zip(p.ravel(), t.ravel()):
        total += (a - b) ** 2
    loss, grad = nn.mse_loss(p, t)
    assert abs(loss - total / p.size) < 1e-12
    np.testing.assert_allclose(grad, 2 * (p - t) / p.size)


def test_mse_loss_shape_mismatch():
    with pytest.raises(ValueError):
        nn.mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


# -- parameter counting ---------------------------------------------------------

def test_param_count_default_near_1_08_million():
    n = nn.param_count(UNetConfig())
    assert n == 1_079_537
    assert 1.03e6 <= n <= 1.13e6


def test_param_count_quadratic_in_width():
    a = nn.param_count(UNetConfig(base_channels=16))
    b = nn.param_count(UNetConfig(base_channels=32))
    assert 3.9 < b / a < 4.1


def test_param_count_single_level():
    # conv 1->4 (3x3), conv 4->4 (3x3), head 4->1 (1x1)
    expected = (1 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + (4 * 1 + 1)
    assert nn.param_count(UNetConfig(base_channels=4, depth=1)) == expected


def test_model_params_views_share_storage():
    p = ModelParams(UNetConfig(base_channels=2, depth=2))
    p.weights["enc0a"][0, 0, 1, 1] = 7.0
    assert 7.0 in p.data
    assert p.size == nn.param_count(p.config)


# -- network ---------------------------------------------------------------------

def test_unet_shapes_and_zero_params():
    cfg = UNetConfig(base_channels=4, depth=3)
    x = np.random.default_rng(9).standard_normal((2, 1, 64, 64)).astype(np.float32)
    y = nn.unet_forward(ModelParams.initialize(cfg), x)
    assert y.shape == x.shape
    assert not nn.unet_forward(ModelParams(cfg), x).any()


def test_unet_rejects_bad_sizes():
    params = ModelParams.initialize(UNetConfig(base_channels=2, depth=3))
    with pytest.raises(ValueError):
        nn.unet_forward(params, np.zeros((1, 1, 10, 8)))
    with pytest.raises(ValueError):
        nn.unet_forward(params, np.zeros((1, 2, 8, 8)))


def test_unet_whole_image_256x192():
    params = ModelParams.initialize(UNetConfig())
    x = np.random.default_rng(10).uniform(-1, 1, (1, 1, 256, 192)).astype(np.float32)
    y = nn.unet_forward(params, x)
    assert y.shape == x.shape
    assert np.all(np.isfinite(y))


def test_unet_deterministic():
    params = ModelParams.initialize(UNetConfig(base_channels=4, depth=3), seed=3)
    x = np.random.default_rng(11).standard_normal((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(nn.unet_forward(params, x), nn.unet_forward(params, x))


def test_backward_requires_forward():
    net = UNet(ModelParams.initialize(UNetConfig(base_channels=2, depth=2)))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 1, 4, 4)))


@pytest.mark.parametrize("depth,base,size", [(1, 3, 6), (2, 2, 8), (3, 2, 8)])
def test_unet_grad_check(depth, base, size):
    cfg = UNetConfig(base_channels=base, depth=depth)
    params = ModelParams.initialize(cfg, seed=depth, dtype=np.float64)
    x = np.random.default_rng(12).standard_normal((2, 1, size, size))
    assert nn.grad_check(params, x, epsilon=1e-5, n_samples=300) < 1e-4


def test_unet_input_gradient():
    cfg = UNetConfig(base_channels=2, depth=2)
    params = ModelParams.initialize(cfg, seed=5, dtype=np.float64)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, 1, 4, 4))
    t = rng.standard_normal((1, 1, 4, 4))
    net = UNet(params)
    _, g = nn.mse_loss(net.forward(x), t)
    gx = net.backward(g, need_input_grad=True)
    num = numeric_grad(lambda: nn.mse_loss(net.forward(x, keep_cache=False), t)[0], x)
    assert rel_err(gx, num) < 1e-4


def test_grad_check_linear_model_is_exact():
    # positive weights and large biases keep every ReLU active, so each
    # parameter enters the loss quadratically and central differences are exact
    cfg = UNetConfig(base_channels=1, depth=1)
    params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
    for name in ("enc0a", "enc0b"):
        params.weights[name][...] = np.abs(params.weights[name])
        params.biases[name][...] = 10.0
    x = np.random.default_rng(14).uniform(-1, 1, (1, 1, 4, 4))
    assert nn.grad_check(params, x, n_samples=500) < 1e-8


def test_grad_check_rejects_zero_epsilon():
    params = ModelParams.initialize(UNetConfig(base_channels=2, depth=2))
    with pytest.raises(ValueError):
        nn.grad_check(params, np.zeros((1, 1, 8, 8)), epsilon=0)


def test_bounded_inputs_stay_finite():
    params = ModelParams.initialize(UNetConfig(base_channels=4, depth=4), seed=1)
    net = UNet(params)
    x = np.random.default_rng(15).uniform(-10, 10, (2, 1, 32, 32)).astype(np.float32)
    y = net.forward(x)
    _, g = nn.mse_loss(y, np.zeros_like(y))
    net.backward(g)
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(params.grad))


# -- optimiser ---------------------------------------------------------------------

def _scalar_params(value):
    cfg = UNetConfig(base_channels=1, depth=1)
    p = ModelParams(cfg, dtype=np.float64)
    p.data[...] = value
    return p


def test_adamw_zero_grad_no_decay_is_noop():
    p = _scalar_params(1.0)
    before = p.data.copy()
    nn.adamw_step(OptimizerState(lr=1e-3, weight_decay=0.0), p, np.zeros(p.size))
    np.testing.assert_array_equal(p.data, before)


def test_adamw_first_step_hand_value():
    p = _scalar_params(1.0)
    g = np.full(p.size, 0.5)
    state = OptimizerState(lr=1e-3, weight_decay=0.0, epsilon=1e-8)
    nn.adamw_step(state, p, g)
    # m_hat = 0.5, v_hat = 0.25 -> step = lr * 0.5 / (0.5 + eps)
    expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)
    assert state.step == 1
    assert abs(p.data[0] - 0.999) < 1e-10


def test_adamw_pure_decay():
    p = _scalar_params(2.0)
    nn.adamw_step(OptimizerState(lr=1e-3, weight_decay=0.01), p, np.zeros(p.size))
    np.testing.assert_allclose(p.data, 2.0 * (1 - 1e-3 * 0.01), rtol=1e-15)


def test_adamw_rejects_non_finite():
    p = _scalar_params(1.0)
    g = np.zeros(p.size)
    g[0] = np.nan
    with pytest.raises(nn.TrainingError):
        nn.adamw_step(OptimizerState(), p, g)


def test_adamw_decreases_quadratic():
    # loss = 0.5 * sum((theta - c)^2); any lr below ~min|theta - c| gives a decrease
    p = _scalar_params(0.0)
    c = np.linspace(1, 2, p.size)
    state = OptimizerState(lr=1e-2, weight_decay=0.0)
    for _ in range(5):
        before = 0.5 * np.sum((p.data - c) ** 2)
        nn.adamw_step(state, p, p.data - c)
        assert 0.5 * np.sum((p.data - c) ** 2) < before
