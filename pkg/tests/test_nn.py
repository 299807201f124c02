import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styledeid import nn


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def brute_conv(x, w):
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, ww, _ = x.shape
    out = np.zeros((n, h, ww, w.shape[3]))
    for i in range(h):
        for j in range(ww):
            patch = xp[:, i:i + k, j:j + k, :]
            out[:, i, j] = np.einsum("nabc,abcd->nd", patch, w)
    return out


@pytest.mark.parametrize("cin,cout", [(2, 5), (5, 2), (3, 3)])
def test_conv_matches_brute_force(rng, cin, cout):
    x = rng.standard_normal((2, 6, 5, cin))
    w = rng.standard_normal((3, 3, cin, cout))
    y, _ = nn.conv2d(x, w)
    np.testing.assert_allclose(y, brute_conv(x, w), atol=1e-12)


@pytest.mark.parametrize("cin,cout", [(2, 5), (5, 2)])
def test_conv_gradients_match_finite_differences(rng, cin, cout):
    x = rng.standard_normal((2, 4, 4, cin))
    w = rng.standard_normal((3, 3, cin, cout))
    up = rng.standard_normal((2, 4, 4, cout))

    def loss():
        return float((nn.conv2d(x, w)[0] * up).sum())

    np.testing.assert_allclose(nn.conv2d_input_grad(up, w), numeric_grad(loss, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(nn.conv2d_kernel_grad(up, x, w.shape), numeric_grad(loss, w), rtol=1e-6, atol=1e-8)


def test_shift_scatter_is_adjoint_of_gather(rng):
    x = rng.standard_normal((1, 5, 6, 2))
    z = rng.standard_normal((1, 5, 6, 18))
    lhs = (nn.shift_gather(x, 3) * z).sum()
    rhs = (x * nn.shift_scatter(z, 3, sign=-1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


LAYERS = [
    (nn.Dense(6, 4), (3, 6)),
    (nn.LeakyReLU(0.2), (3, 6)),
    (nn.AvgPool2(), (2, 4, 4, 3)),
    (nn.Flatten(), (2, 2, 2, 3)),
    (nn.GlobalMeanStd(), (2, 4, 4, 3)),
    (nn.L2Normalize(), (3, 5)),
    (nn.Scale(3.0), (3, 5)),
    (nn.Conv(3, 4), (2, 4, 4, 3)),
]


@pytest.mark.parametrize("layer,shape", LAYERS, ids=lambda v: type(v).__name__ if not isinstance(v, tuple) else "")
def test_layer_backward_matches_finite_differences(rng, layer, shape):
    p = layer.init(rng)
    x = rng.standard_normal(shape)
    if isinstance(layer, nn.LeakyReLU):
        # keep probes away from the kink at 0
        x = np.where(np.abs(x) < 0.1, 0.5, x)
    y, cache = layer.forward(p, x)
    up = rng.standard_normal(y.shape)
    gx, grads = layer.backward(p, cache, up)

    def loss():
        return float((layer.forward(p, x)[0] * up).sum())

    np.testing.assert_allclose(gx, numeric_grad(loss, x), rtol=1e-5, atol=1e-7)
    for k, gk in grads.items():
        np.testing.assert_allclose(gk, numeric_grad(loss, p[k]), rtol=1e-5, atol=1e-7)


def test_leaky_relu_slope_one_is_identity_with_unit_gradient(rng):
    x = rng.standard_normal(50)
    np.testing.assert_array_equal(nn.leaky_relu(x, 1.0), x)
    g = numeric_grad(lambda: float(nn.leaky_relu(x, 1.0).sum()), x, h=1e-4)
    np.testing.assert_allclose(g, 1.0, atol=1e-9)
    np.testing.assert_array_equal(nn.leaky_relu_grad(x, np.ones(50), 1.0), 1.0)


def test_softmax_xent_gradient(rng):
    z = rng.standard_normal((4, 5))
    y = np.array([0, 3, 1, 4])
    _, g = nn.softmax_xent(z.copy(), y)
    np.testing.assert_allclose(g, numeric_grad(lambda: nn.softmax_xent(z.copy(), y)[0], z), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4))
def test_upsample_grad_is_adjoint(n, c):
    r = np.random.default_rng(n * 10 + c)
    x = r.standard_normal((n, 3, 3, c))
    g = r.standard_normal((n, 6, 6, c))
    assert (nn.upsample2(x) * g).sum() == pytest.approx((x * nn.upsample2_grad(g)).sum(), rel=1e-12)


def test_sequential_input_grad_matches_full_backward(rng):
    net = nn.Sequential([nn.Conv(3, 4), nn.LeakyReLU(), nn.AvgPool2(), nn.Flatten(), nn.Dense(16, 2)], rng=rng)
    x = rng.standard_normal((2, 4, 4, 3))
    y, caches = net.forward(x)
    up = rng.standard_normal(y.shape)
    full, _ = net.backward(caches, up)
    np.testing.assert_allclose(net.input_grad(caches, up), full, atol=1e-12)


def fit_once(seed):
    r = np.random.default_rng(0)
    x = r.standard_normal((40, 5)).astype(np.float32)
    y = (x[:, 0] > 0).astype(int)
    net = nn.Sequential([nn.Dense(5, 8), nn.LeakyReLU(), nn.Dense(8, 2)], rng=np.random.default_rng(1))
    hist = nn.fit(net, x, nn.softmax_xent, y, nn.TrainConfig(epochs=5, lr=1e-2, batch_size=8, seed=seed))
    return net, hist


def test_fit_is_deterministic_and_learns():
    a, ha = fit_once(0)
    b, hb = fit_once(0)
    assert nn.weights_hash(a.state()) == nn.weights_hash(b.state())
    assert ha == hb
    assert ha[-1] < ha[0]


def test_fit_raises_on_divergence():
    net = nn.Sequential([nn.Dense(2, 1)], rng=np.random.default_rng(0))
    x = np.ones((4, 2), np.float32)

    def bad(out, t):
        return float("nan"), np.zeros_like(out)

    with pytest.raises(nn.TrainingError, match="non-finite"):
        nn.fit(net, x, bad, np.zeros(4), nn.TrainConfig(epochs=1, batch_size=4))


def test_weights_hash_sensitive_to_values_and_names():
    a = {"w": np.zeros(3)}
    assert nn.weights_hash(a) != nn.weights_hash({"w": np.array([0.0, 0.0, 1e-300])})
    assert nn.weights_hash(a) != nn.weights_hash({"v": np.zeros(3)})
