import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlrecon.neural import (
    Gradients,
    Network,
    NetworkSpec,
    TrainConfig,
    adam_step,
    adam_update,
    backward,
    conv2d,
    forward,
    init_network,
    init_variance,
    load_network,
    loss,
    residual,
    save_network,
    train,
)
from dlrecon.neural import _residual


def unit_variance_net(depth=3, width=4, seed=0):
    """float64 net with N(0,1) weights and biases; keeps pre-activations clear of ReLU kinks."""
    spec = NetworkSpec(depth=depth, width=width)
    net = init_network(spec, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for w, b in zip(net.weights, net.biases):
        w[...] = rng.standard_normal(w.shape)
        b[...] = rng.standard_normal(b.shape)
    return net


def zero_net(spec=NetworkSpec(depth=3, width=4)):
    net = init_network(spec, 0, dtype=np.float64)
    for p in net.params:
        p[...] = 0.0
    return net


def naive_conv(x, w, b):
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[0]))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[:, i, j, o] = np.einsum("nabc,cab->n", xp[:, i:i + 3, j:j + 3, :], w[o]) + b[o]
    return out


def test_spec_validation():
    for bad in (dict(depth=1), dict(width=0), dict(kernel=5), dict(residual=False), dict(init="xavier")):
        with pytest.raises(ValueError):
            NetworkSpec(**bad)
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(iterations=-1), dict(patch_size=2)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert NetworkSpec(depth=3, width=4).channels() == [(1, 4), (4, 4), (4, 1)]


def test_init_deterministic_and_zero_bias():
    a, b = init_network(NetworkSpec(), 3), init_network(NetworkSpec(), 3)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)
    assert all(not bias.any() for bias in a.biases)
    assert not np.array_equal(a.weights[0], init_network(NetworkSpec(), 4).weights[0])


@pytest.mark.parametrize("init", ["glorot", "he"])
def test_init_variance_matches_fan_target(init):
    spec = NetworkSpec(depth=4, width=48, init=init)
    net = init_network(spec, 0, dtype=np.float64)
    for layer in (1, 2):
        w = net.weights[layer]
        assert w.size >= 10_000
        target = init_variance(spec, layer)
        assert abs(w.var() / target - 1) < 0.2


def test_conv_matches_naive_loop(rng):
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.allclose(conv2d(x, w, b), naive_conv(x, w, b))


def test_zero_network_is_identity(rng):
    f = rng.standard_normal((16, 16))
    assert np.array_equal(forward(zero_net(), f), f)


@pytest.mark.parametrize("side", [16, 32, 64])
def test_shape_preserved(side):
    net = init_network(NetworkSpec(depth=3, width=4))
    assert forward(net, np.zeros((side, side))).shape == (side, side)
    assert forward(net, np.zeros((2, side, side))).shape == (2, side, side)
    with pytest.raises(ValueError):
        forward(net, np.zeros(side))


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_linearised_residual_is_homogeneous(alpha, seed):
    net = unit_variance_net()
    for b in net.biases:
        b[...] = 0.0
    f = np.random.default_rng(seed).standard_normal((8, 8))
    lhs = residual(net, alpha * f, linear=True)
    rhs = alpha * residual(net, f, linear=True)
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_gradients_vanish_at_target(rng):
    net = unit_variance_net()
    f = rng.random((2, 8, 8))
    value, grads = backward(net, f, forward(net, f))
    assert value == 0.0
    assert max(np.abs(g).max() for g in grads.params) <= 1e-12


def test_last_bias_gradient_is_mean_error(rng):
    net = unit_variance_net()
    f, t = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    _, grads = backward(net, f, t)
    assert grads.biases[-1][0] == pytest.approx(np.mean(forward(net, f) - t), rel=1e-12)


def relu_pattern(net, f):
    cache = []
    _residual(net, f[None], cache=cache)
    return np.concatenate([(a > 0).ravel() for a, _ in cache[1:]])


def finite_difference_error(net, f, t, h=1e-3):
    """Worst per-tensor relative error of central differences against backprop.

    Also checks that no +-h probe flips a ReLU: with the pattern fixed the
    loss is quadratic along each probe, so central differences are exact up
    to rounding and any mismatch is a backprop bug.
    """
    _, grads = backward(net, f, t)
    base = relu_pattern(net, f)
    worst = 0.0
    for p, g in zip(net.params, grads.params):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss(net, f, t)
            assert np.array_equal(relu_pattern(net, f), base)
            p[idx] = old - h
            down = loss(net, f, t)
            assert np.array_equal(relu_pattern(net, f), base)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, np.linalg.norm(num - g) / np.linalg.norm(num))
    return worst


# seeds whose +-h probes stay on one side of every ReLU kink
@pytest.mark.parametrize("seed", [0, 2, 4])
def test_finite_difference_gradients(seed):
    net = unit_variance_net(seed=seed)
    rng = np.random.default_rng(seed)
    f, t = rng.random((8, 8)), rng.random((8, 8))
    assert finite_difference_error(net, f, t) < 1e-4


def test_adam_zero_gradient_keeps_weights():
    net = init_network(NetworkSpec(depth=3, width=4), 0, dtype=np.float64)
    for m in net.adam_m:
        m[...] = 1.0
    zeros = Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])
    adam_step(net, zeros, TrainConfig(learning_rate=0.1))
    # zero gradient, but non-zero first moment: the step is driven by momentum only
    assert all(np.allclose(m, 0.9) for m in net.adam_m)
    assert all(not v.any() for v in net.adam_v)
    net2 = init_network(NetworkSpec(depth=3, width=4), 0, dtype=np.float64)
    adam_step(net2, zeros, TrainConfig(learning_rate=0.1))
    for p, q in zip(net2.params, init_network(NetworkSpec(depth=3, width=4), 0, dtype=np.float64).params):
        assert np.array_equal(p, q)


def test_adam_first_step_is_signed_learning_rate():
    p = np.array([0.0, 0.0, 1.0])
    g = np.array([3.0, -0.5, 1e-2])
    m, v = np.zeros(3), np.zeros(3)
    adam_update([p], [g], [m], [v], 1, 0.01)
    assert np.allclose(p, [-0.01, 0.01, 1.0 - 0.01], rtol=1e-5)
    with pytest.raises(ValueError):
        adam_update([p], [g], [m], [v], 0, 0.01)


def test_adam_scalar_quadratic_converges():
    p, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 201):
        adam_update([p], [p - 1.0], [m], [v], t, 0.1)
    assert abs(p[0] - 1.0) < 1e-3


def toy_pairs(n=50, side=12, seed=0):
    rng = np.random.default_rng(seed)
    targets = rng.random((n, side, side))
    inputs = targets + 0.1 * rng.standard_normal(targets.shape)
    return list(inputs), list(targets)


def test_training_reduces_loss():
    x, y = toy_pairs()
    net = init_network(NetworkSpec(depth=3, width=8), 0)
    before = loss(net, np.stack(x), np.stack(y))
    train(net, x, y, TrainConfig(learning_rate=1e-3, batch_size=10, iterations=60))
    assert loss(net, np.stack(x), np.stack(y)) < before
    assert len(net.loss_history) == 60 and net.adam_t == 60


def test_training_deterministic_and_patches():
    x, y = toy_pairs(10)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, iterations=7, patch_size=6, seed=5)
    a = train(init_network(NetworkSpec(depth=3, width=4), 1), x, y, cfg)
    b = train(init_network(NetworkSpec(depth=3, width=4), 1), x, y, cfg)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)


def test_zero_iterations_leave_network_unchanged():
    x, y = toy_pairs(5)
    net = init_network(NetworkSpec(depth=3, width=4), 2)
    before = [p.copy() for p in net.params]
    train(net, x, y, TrainConfig(iterations=0))
    assert all(np.array_equal(p, q) for p, q in zip(net.params, before))


def test_training_rejects_bad_data():
    net = init_network(NetworkSpec(depth=3, width=4))
    with pytest.raises(ValueError):
        train(net, [], [], TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        train(net, [np.zeros((4, 4))], [np.zeros((5, 5))], TrainConfig(iterations=1))


def test_copy_resets_optimizer():
    x, y = toy_pairs(5)
    net = train(init_network(NetworkSpec(depth=3, width=4)), x, y, TrainConfig(iterations=3, batch_size=2))
    c = net.copy(reset_optimizer=True)
    assert c.adam_t == 0 and not c.loss_history and all(not m.any() for m in c.adam_m)
    assert net.adam_t == 3
    assert c.num_parameters() == net.num_parameters() == 4 * 9 + 4 + 16 * 9 + 4 + 4 * 9 + 1


def test_weights_round_trip(tmp_path):
    net = unit_variance_net().astype(np.float32)
    save_network(net, tmp_path / "w" / "net.json", {"note": "x"})
    manifest = json.loads((tmp_path / "w" / "net.json").read_text())
    assert manifest["dtype"] == "float32-le" and manifest["training"]["note"] == "x"
    raw = (tmp_path / "w" / "net.bin").read_bytes()
    assert len(raw) == 4 * net.num_parameters()
    back = load_network(tmp_path / "w" / "net.json")
    for p, q in zip(net.params, back.params):
        assert np.array_equal(p, q)
    (tmp_path / "w" / "net.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_network(tmp_path / "w" / "net.json")


def test_shape_mismatch_rejected():
    spec = NetworkSpec(depth=3, width=4)
    with pytest.raises(ValueError):
        Network(spec, [np.zeros((4, 1, 3, 3))] * 3, [np.zeros(4)] * 3)
