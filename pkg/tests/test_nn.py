import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latency_atlas import nn
from latency_atlas.errors import DomainError, ValidationError
from latency_atlas.models import build_architecture

from support import grad_close, numeric_network_gradients


def small_net(seed=0):
    net = [nn.Conv1D(1, 3, 3), nn.Relu(), nn.Conv1D(3, 4, 2), nn.Relu(), nn.Flatten(),
           nn.Dense(20, 6), nn.Relu(), nn.Dense(6, 1), nn.Softplus()]
    return nn.init_network(net, seed)


def randomize_biases(net, rng):
    for layer in net:
        if "b" in layer.params:
            layer.params["b"] = rng.normal(0, 0.1, layer.params["b"].shape)


# --------------------------------------------------------------------------
# Scaler


def test_scaler_two_points():
    s = nn.scaler_fit(np.array([[0.0], [2.0]]))
    assert list(s.means) == [1.0] and list(s.stds) == [1.0]
    assert nn.scaler_transform(s, np.array([[0.0], [2.0]])).tolist() == [[-1.0], [1.0]]


def test_scaler_constant_column():
    X = np.array([[3.0, 1.0], [3.0, 2.0], [3.0, 4.0]])
    s = nn.scaler_fit(X)
    assert s.stds[0] == 1.0 and s.constant.tolist() == [True, False]
    assert np.all(s.transform(X)[:, 0] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_scaler_properties(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(rng.uniform(-100, 100, d), rng.uniform(0.1, 50, d), (n, d))
    s = nn.scaler_fit(X)
    Z = s.transform(X)
    np.testing.assert_allclose(nn.scaler_inverse(s, Z), X, atol=1e-9, rtol=0)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-9)


def test_scaler_width_checked():
    s = nn.scaler_fit(np.ones((3, 2)))
    with pytest.raises(ValidationError):
        s.transform(np.ones((3, 3)))


# --------------------------------------------------------------------------
# Forward


def test_perfnetv2_shapes():
    net = nn.init_network(build_architecture("perfnetv2", 9), 0)
    x = np.random.default_rng(0).normal(size=(4, 9))
    shapes = []
    for layer in net:
        x, _ = layer.forward(x)
        shapes.append(x.shape)
    assert shapes[0] == (4, 7, 32)
    assert shapes[2] == (4, 6, 128)
    assert shapes[4] == (4, 768)
    assert shapes[-1] == (4, 1)


def test_zero_network_outputs_zero():
    net = [nn.Conv1D(1, 4, 3), nn.Relu(), nn.Flatten(), nn.Dense(12, 5), nn.Relu(),
           nn.Dense(5, 1)]
    X = np.random.default_rng(1).normal(size=(7, 5))
    assert np.all(nn.predict(net, X) == 0.0)


def test_dropout_identity_at_inference():
    net = nn.init_network([nn.Dense(6, 8), nn.Dropout(0.3), nn.Dense(8, 1)], 3)
    X = np.random.default_rng(2).normal(size=(5, 6))
    a, _ = nn.forward(net, X, training=False, dropout_seed=1)
    b, _ = nn.forward(net, X, training=False, dropout_seed=2)
    assert np.array_equal(a, b)
    c, _ = nn.forward(net, X, training=True, dropout_seed=1)
    assert not np.array_equal(a, c)


def test_forward_shape_error_names_layer():
    net = [nn.Dense(3, 2), nn.Dense(5, 1)]
    with pytest.raises(ValidationError) as info:
        nn.forward(net, np.ones((2, 3)))
    assert info.value.layer_index == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 7), st.integers(1, 4))
def test_conv1d_output_length(length, kernel, stride):
    if kernel > length:
        return
    layer = nn.Conv1D(1, 2, kernel, stride)
    y, _ = layer.forward(np.zeros((3, length)))
    assert y.shape == (3, (length - kernel) // stride + 1, 2)
    if stride == 1:
        assert y.shape[1] == length - kernel + 1


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(5)
    layer = nn.Conv1D(2, 3, 3, stride=2)
    layer.init(rng)
    layer.params["b"] = rng.normal(size=3)
    x = rng.normal(size=(2, 9, 2))
    y, _ = layer.forward(x)
    W, b = layer.params["W"], layer.params["b"]
    for n in range(2):
        for t in range(y.shape[1]):
            for o in range(3):
                want = b[o] + sum(W[k, c, o] * x[n, 2 * t + k, c]
                                  for k in range(3) for c in range(2))
                assert y[n, t, o] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_layer_config_round_trip():
    net = build_architecture("perfnetv2", 13)
    again = [nn.layer_from_config(layer.config()) for layer in net]
    assert [l.config() for l in again] == [l.config() for l in net]


# --------------------------------------------------------------------------
# Backward


def test_small_net_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    net = small_net(0)
    randomize_biases(net, rng)
    X = rng.normal(size=(4, 8))
    y = rng.uniform(0.5, 5.0, 4)
    for loss in (nn.maple_loss, nn.msle_loss):
        out, cache = nn.forward(net, X)
        _, dy = loss(out.ravel(), y)
        analytic = nn.backward(net, cache, dy.reshape(out.shape))
        numeric = numeric_network_gradients(
            net, X, lambda Y: np.array([loss(row, y)[0] for row in Y]))
        for g_a, g_n in zip(analytic, numeric):
            for name in g_n:
                ok, worst = grad_close(g_a[name], g_n[name])
                assert ok, (loss.__name__, name, worst)


def test_zero_upstream_gives_zero_gradients():
    net = small_net(1)
    out, cache = nn.forward(net, np.random.default_rng(3).normal(size=(4, 8)))
    for g in nn.backward(net, cache, np.zeros_like(out)):
        for value in g.values():
            assert np.all(value == 0.0)


def test_one_unit_dense_gradient_is_input():
    layer = nn.Dense(1, 1)
    layer.params["W"] = np.array([[1.0]])
    x = np.array([[0.7], [-1.3]])
    out, cache = nn.forward([layer], x)
    grads = nn.backward([layer], cache, np.ones_like(out))
    assert grads[0]["W"][0, 0] == pytest.approx(0.7 - 1.3)
    assert grads[0]["b"][0] == 2.0


def test_dropout_backward_uses_forward_mask():
    net = [nn.Dropout(0.5)]
    X = np.ones((4, 6))
    out, cache = nn.forward(net, X, training=True, dropout_seed=9)
    (g,) = nn.backward(net, cache, np.ones_like(out))
    assert g == {}
    dx = net[0].backward(np.ones_like(out), cache[0])[0]
    assert np.array_equal(dx, out)


def test_backward_cache_length_checked():
    net = small_net()
    with pytest.raises(ValidationError):
        nn.backward(net, [], np.zeros((1, 1)))


# --------------------------------------------------------------------------
# Losses


@pytest.mark.parametrize("loss", [nn.maple_loss, nn.msle_loss])
def test_loss_zero_at_target(loss):
    y = np.array([0.1, 2.0, 30.0])
    value, grad = loss(y.copy(), y)
    assert value == 0.0
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("loss", [nn.maple_loss, nn.msle_loss])
def test_loss_forced_value(loss):
    assert loss([math.e ** 2 - 1], [math.e - 1])[0] == 1.0


@pytest.mark.parametrize("loss", [nn.maple_loss, nn.msle_loss])
def test_loss_gradient_finite_difference(loss):
    rng = np.random.default_rng(11)
    h = 1e-5
    for _ in range(20):
        y = rng.uniform(0.05, 20, 6)
        y_hat = y * rng.uniform(0.3, 3.0, 6)
        _, grad = loss(y_hat, y)
        numeric = np.empty_like(y_hat)
        for i in range(y_hat.size):
            up, down = y_hat.copy(), y_hat.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = (loss(up, y)[0] - loss(down, y)[0]) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-9)


def test_maple_domain():
    with pytest.raises(DomainError):
        nn.maple_loss([1.0], [0.0])
    with pytest.raises(DomainError):
        nn.msle_loss([1.0], [-1.0])
    with pytest.raises(ValidationError):
        nn.msle_loss([1.0, 2.0], [1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1e3), st.floats(0.01, 1e3)), min_size=1,
                max_size=20))
def test_losses_nonnegative_and_zero_iff_equal(pairs):
    y_hat = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    for loss in (nn.maple_loss, nn.msle_loss):
        value = loss(y_hat, y)[0]
        assert value >= 0
        if np.array_equal(y_hat, y):
            assert value == 0
        elif not np.allclose(np.log1p(y_hat), np.log1p(y), rtol=0, atol=1e-150):
            assert value > 0


# --------------------------------------------------------------------------
# Adam


def test_adam_first_step():
    params = [np.zeros(1)]
    state = nn.adam_init(params)
    nn.adam_step(params, [np.ones(1)], state, 0.1)
    assert params[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)
    assert state.step == 1


def test_adam_zero_gradient_noop():
    params = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [p.copy() for p in params]
    state = nn.adam_init(params)
    nn.adam_step(params, [np.zeros(2), np.zeros((2, 2))], state, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(params, before))


def test_adam_deterministic():
    def run():
        params = [np.array([0.5, -0.5])]
        state = nn.adam_init(params)
        for _ in range(2):
            nn.adam_step(params, [np.array([0.3, -1.2])], state, 0.01)
        return params[0]

    assert np.array_equal(run(), run())


def test_adam_shape_checked():
    params = [np.zeros(2)]
    with pytest.raises(ValidationError):
        nn.adam_step(params, [np.zeros(3)], nn.adam_init(params), 0.1)
