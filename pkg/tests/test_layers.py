import numpy as np
import pytest
from scipy.signal import correlate

from advaudio.layers import AvgPool2d, BatchNorm2d, Conv2d, Dropout, GlobalPool, ReLU, build_layer
from advaudio.optim import Adam


def _fd_check(layer, x, train=False, seed=0, h=1e-6, tol=1e-6):
    """Directional finite differences for the input and every parameter (float64)."""
    rng = np.random.default_rng(seed)
    y, cache = layer.forward(x, train=train, rng=np.random.default_rng(99))
    gy = rng.standard_normal(y.shape)
    gx, grads = layer.backward(cache, gy, param_grads=True)

    def f(xx):
        return np.sum(gy * layer.forward(xx, train=train, rng=np.random.default_rng(99))[0])

    v = rng.standard_normal(x.shape)
    num = (f(x + h * v) - f(x - h * v)) / (2 * h)
    assert abs(gx.ravel() @ v.ravel() - num) <= tol * max(1.0, abs(num))
    for k, p in layer.params.items():
        d = rng.standard_normal(p.shape)
        p += h * d
        up = f(x)
        p -= 2 * h * d
        down = f(x)
        p += h * d
        assert abs(grads[k].ravel() @ d.ravel() - (up - down) / (2 * h)) <= tol * max(1.0, abs(up - down) / (2 * h))


@pytest.mark.parametrize("kernel,stride,padding", [(5, 2, 2), (3, 1, 1), (1, 1, 0), (3, 2, 0)])
def test_conv_matches_correlation_oracle(kernel, stride, padding):
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 4, kernel, stride, padding, rng=rng, dtype=np.float64)
    conv.params["bias"][:] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 11, 9))
    y, _ = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    for b in range(2):
        for o in range(4):
            full = sum(correlate(xp[b, c], conv.params["weight"][o, c], mode="valid") for c in range(3))
            assert np.allclose(y[b, o], full[::stride, ::stride] + conv.params["bias"][o])


@pytest.mark.parametrize("kernel,stride,padding", [(5, 2, 2), (3, 1, 1), (1, 1, 0)])
def test_conv_gradients(kernel, stride, padding):
    conv = Conv2d(2, 3, kernel, stride, padding, rng=np.random.default_rng(1), dtype=np.float64)
    _fd_check(conv, np.random.default_rng(2).standard_normal((2, 2, 10, 7)))


def test_relu_avgpool_globalpool_gradients():
    x = np.random.default_rng(3).standard_normal((2, 3, 7, 9))
    _fd_check(ReLU(), x)
    _fd_check(AvgPool2d(2), x)
    _fd_check(GlobalPool(), x)


def test_batchnorm_gradients_train_and_eval():
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.params["gamma"][:] = [0.5, 1.5, -1.0]
    bn.params["beta"][:] = [0.1, 0.0, -0.3]
    bn.buffers["running_mean"][:] = [0.2, -0.1, 0.0]
    bn.buffers["running_var"][:] = [1.5, 0.7, 2.0]
    x = np.random.default_rng(4).standard_normal((4, 3, 5, 6))
    _fd_check(bn, x, train=False)
    saved = {k: v.copy() for k, v in bn.buffers.items()}
    _fd_check(bn, x, train=True, tol=1e-5)
    for k in saved:
        bn.buffers[k][...] = saved[k]


def test_batchnorm_running_stats_update():
    bn = BatchNorm2d(2, momentum=0.1, dtype=np.float64)
    x = np.random.default_rng(5).standard_normal((3, 2, 4, 4)) * 2 + 1
    bn.forward(x, train=True)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(bn.buffers["running_mean"], 0.1 * mean)
    assert np.allclose(bn.buffers["running_var"], 0.9 + 0.1 * var)
    assert np.all(bn.buffers["running_var"] > 0)


def test_dropout_is_identity_in_eval_and_scaled_in_train():
    x = np.ones((2, 2, 50, 50))
    d = Dropout(0.3)
    assert d.forward(x, train=False)[0] is x
    y, _ = d.forward(x, train=True, rng=np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 1 / 0.7}
    assert abs(y.mean() - 1.0) < 0.05
    _fd_check(d, np.random.default_rng(1).standard_normal((1, 2, 4, 4)), train=True)


def test_global_pool_invariant_to_time_permutation():
    rng = np.random.default_rng(6)
    F = rng.standard_normal((2, 12, 6, 20))
    pool = GlobalPool()
    base, _ = pool.forward(F)
    for _ in range(5):
        perm = rng.permutation(20)
        assert np.array_equal(pool.forward(F[..., perm])[0], base)
    # duplicating the time axis keeps the max over time
    assert np.array_equal(pool.forward(np.concatenate([F, F], axis=3))[0], base)
    assert np.allclose(base, F.mean(axis=2).max(axis=2))


def test_avgpool_floors_odd_sizes():
    x = np.arange(2 * 5 * 7, dtype=float).reshape(1, 2, 5, 7)
    y, _ = AvgPool2d(2).forward(x)
    assert y.shape == (1, 2, 2, 3)
    assert y[0, 0, 0, 0] == np.mean([0, 1, 7, 8])


def test_build_layer_round_trip():
    conv = Conv2d(2, 5, 3, 1, 1, rng=np.random.default_rng(0))
    clone = build_layer(conv.config())
    assert clone.config() == conv.config()
    assert build_layer(Dropout(0.2).config()).rate == 0.2


def test_adam_matches_reference_update():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(p, lr=0.1)
    g1 = np.array([0.5, -1.0, 0.0])
    opt.step({"w": g1})
    # first bias-corrected step is lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0, 3.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p["w"], expect)
    m, v = 0.1 * g1, 0.001 * g1**2
    g2 = np.array([1.0, 1.0, 1.0])
    m = 0.9 * m + 0.1 * g2
    v = 0.999 * v + 0.001 * g2**2
    expect = expect - 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    opt.step({"w": g2})
    assert np.allclose(p["w"], expect)
