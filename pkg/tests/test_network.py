import numpy as np
import pytest
from gradcheck import max_relative_error

from monodyn.analysis import convexity_midpoint_test, monotonicity_scan
from monodyn.network import (
    LINEAR,
    MAX_RELU,
    MIN_RELU,
    DenseLayer,
    LyapunovNet,
    MonotoneNet,
    backward,
    forward,
    lyapunov_value,
    neuron_activation,
    project_nonnegative,
)


def reference_forward(net, X):
    """Independent straight-line evaluation (no BN)."""
    h = (X - net.in_shift) / net.in_scale
    for layer in net.layers:
        s = h @ layer.W + layer.b
        out = np.empty_like(s)
        for j, kind in enumerate(layer.kinds):
            col = s[:, j]
            out[:, j] = np.maximum(col, 0) if kind == MAX_RELU else (
                np.minimum(col, 0) if kind == MIN_RELU else col)
        h = out
    return h * net.out_scale + net.out_shift


def linear_net(W, b=None):
    net = MonotoneNet([W.shape[0], W.shape[1]], constraint_mode="none", batch_norm=False)
    net.layers[0].W[...] = W
    net.layers[0].b[...] = 0.0 if b is None else b
    return net


# ----------------------------------------------------------------- activations


@pytest.mark.parametrize("s,mx,mn", [(2.0, 2.0, 0.0), (-3.0, 0.0, -3.0), (0.0, 0.0, 0.0)])
def test_neuron_activation(s, mx, mn):
    assert neuron_activation(s, "max_relu") == mx
    assert neuron_activation(s, "min_relu") == mn
    assert neuron_activation(s, "linear") == s


def test_neuron_activation_hand_dot_product():
    s = np.dot([2.0, 0.5], [1.0, 2.0]) - 1.0
    assert neuron_activation(s, "max_relu") == 2.0


def test_unknown_activation():
    with pytest.raises(ValueError):
        neuron_activation(1.0, "tanh")


def test_hidden_layers_mix_activations():
    net = MonotoneNet([3, 8, 8, 2], min_fraction=0.25, batch_norm=False)
    kinds = net.activation_kinds()
    assert kinds[0].count("min_relu") == 2 and kinds[0].count("max_relu") == 6
    assert kinds[-1] == ["linear", "linear"]


# ----------------------------------------------------------------- forward


def test_identity_linear_layer():
    net = linear_net(np.eye(3))
    X = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(net(X), X)


def test_zero_weights_give_zero_output():
    net = MonotoneNet([3, 4, 2], constraint_mode="hard_zero", batch_norm=False, linear_output=False,
                      min_fraction=0.0)
    for layer in net.layers:
        layer.W[...] = 0.0
    np.testing.assert_array_equal(net(np.ones((2, 3))), np.zeros((2, 2)))


def test_forward_matches_reference(rng):
    net = MonotoneNet([3, 6, 2], constraint_mode="none", batch_norm=False, rng=1)
    for layer in net.layers:
        layer.b[...] = rng.normal(size=layer.b.shape)
    net.set_scaling(rng.normal(size=(50, 3)), rng.normal(size=(50, 2)))
    X = rng.normal(size=(10, 3))
    np.testing.assert_allclose(net(X), reference_forward(net, X), rtol=1e-13)
    np.testing.assert_allclose(forward(net, X), net.predict(X))


def test_forward_dimension_mismatch():
    net = MonotoneNet([3, 4, 2], batch_norm=False)
    with pytest.raises(ValueError, match="width"):
        net(np.ones((2, 4)))


def test_bn_training_needs_two_rows():
    net = MonotoneNet([3, 4, 2], constraint_mode="bn_soft")
    with pytest.raises(ValueError, match="at least 2"):
        net.forward(np.ones((1, 3)), training=True)


def test_bn_eval_mode_is_deterministic(rng):
    net = MonotoneNet([3, 8, 2], constraint_mode="bn_soft", rng=2)
    for _ in range(3):
        net.forward(rng.normal(size=(16, 3)), training=True)
    X = rng.normal(size=(7, 3))
    assert net(X).tobytes() == net(X).tobytes()


def test_bn_running_stats_frozen_when_asked(rng):
    net = MonotoneNet([3, 8, 2], constraint_mode="bn_soft", rng=2)
    before = net.layers[0].running_mean.copy()
    net.forward(rng.normal(size=(16, 3)), training=True, update_running=False)
    np.testing.assert_array_equal(net.layers[0].running_mean, before)
    net.forward(rng.normal(size=(16, 3)), training=True)
    assert not np.array_equal(net.layers[0].running_mean, before)


def test_initialization_ranges():
    con = MonotoneNet([4, 64, 4], constraint_mode="hard_zero", rng=0)
    assert all(0 < l.W.min() and l.W.max() <= 0.01 for l in con.layers)
    free = MonotoneNet([4, 64, 4], constraint_mode="none", rng=0)
    assert free.layers[0].W.min() < 0 < free.layers[0].W.max()


# ----------------------------------------------------------------- backward


def test_zero_output_grad_gives_zero_grads(rng):
    net = MonotoneNet([3, 5, 2], constraint_mode="bn_soft", rng=3)
    net.forward(rng.normal(size=(4, 3)), training=True)
    grads, dx = backward(net, np.zeros((4, 2)))
    assert all(not np.any(g) for g in grads) and not np.any(dx)


def test_backward_without_cache():
    with pytest.raises(RuntimeError):
        MonotoneNet([2, 2]).backward(np.ones((1, 2)))


def test_linear_least_squares_gradient(rng):
    W = rng.normal(size=(3, 2))
    net = linear_net(W)
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    pred = net.forward(X)
    grads, _ = net.backward(2 * (pred - Y))
    np.testing.assert_allclose(grads[0], X.T @ (2 * (X @ W - Y)), rtol=1e-12)


@pytest.mark.parametrize("mode,bn", [("bn_soft", True), ("none", False), ("hard_zero", False)])
def test_monotone_net_gradients(mode, bn, rng):
    net = MonotoneNet([3, 32, 32, 2], constraint_mode=mode, batch_norm=bn, rng=4)
    for layer in net.layers:
        layer.W += rng.normal(scale=0.3, size=layer.W.shape)
        layer.b[...] = rng.normal(scale=0.1, size=layer.b.shape)
    X, R = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    assert max_relative_error(net, X, R, training=bn) < 1e-4


def test_eval_mode_bn_gradients(rng):
    net = MonotoneNet([3, 8, 2], constraint_mode="bn_soft", rng=5)
    net.forward(rng.normal(size=(30, 3)), training=True)
    X, R = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
    assert max_relative_error(net, X, R, training=False) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    net = MonotoneNet([3, 16, 2], constraint_mode="none", batch_norm=False, rng=6)
    net.set_scaling(rng.normal(size=(40, 3)) * 3, rng.normal(size=(40, 2)))
    x, r = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    net.forward(x)
    _, dx = net.backward(r)
    fd = np.array([(np.sum(net(x + e) * r) - np.sum(net(x - e) * r)) / 2e-6
                   for e in np.eye(3)[:, None, :] * 1e-6])
    np.testing.assert_allclose(dx[0], fd, rtol=1e-5)


# ----------------------------------------------------------------- projection


def test_hard_zero_projection_hand_values():
    net = MonotoneNet([3, 1], constraint_mode="hard_zero", batch_norm=False)
    net.layers[0].W[:, 0] = [-0.5, 0.3, 0.0]
    net.layers[0].b[...] = -2.0
    assert project_nonnegative(net)
    np.testing.assert_array_equal(net.layers[0].W[:, 0], [0.0, 0.3, 0.0])
    assert net.layers[0].b[0] == -2.0


def test_projection_leaves_nonnegative_weights():
    net = MonotoneNet([4, 8, 2], constraint_mode="hard_zero", rng=0)
    before = [p.copy() for p in net.params()]
    net.project_nonnegative()
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)


def test_small_random_projection_range():
    net = MonotoneNet([1, 1], constraint_mode="hard_small_random", batch_norm=False)
    net.layers[0].W[...] = -0.5
    net.project_nonnegative(rng=0)
    w = net.layers[0].W[0, 0]
    assert 0 < w <= 1e-3


def test_projection_covers_bn_scale_not_shift():
    net = MonotoneNet([2, 4, 1], constraint_mode="hard_zero", batch_norm=True)
    layer = net.layers[0]
    layer.gamma[...] = -1.0
    layer.beta[...] = -1.0
    net.project_nonnegative()
    assert np.all(layer.gamma == 0) and np.all(layer.beta == -1.0)


@pytest.mark.parametrize("mode", ["bn_soft", "none"])
def test_projection_is_noop_with_warning(mode):
    net = MonotoneNet([2, 2], constraint_mode=mode, batch_norm=False)
    net.layers[0].W[...] = -1.0
    with pytest.warns(RuntimeWarning):
        assert net.project_nonnegative() is False
    assert np.all(net.layers[0].W == -1.0)


def test_projected_net_is_monotone(rng):
    net = MonotoneNet([4, 32, 32, 4], constraint_mode="hard_zero", batch_norm=False, rng=7)
    for layer in net.layers:
        layer.W += rng.normal(scale=0.5, size=layer.W.shape)
        layer.b[...] = rng.normal(scale=0.2, size=layer.b.shape)
    assert monotonicity_scan(net, n_pairs=2000, seed=1) > 0
    net.project_nonnegative()
    assert net.is_nonnegative()
    assert monotonicity_scan(net, n_pairs=10_000, seed=1) == 0.0


def test_max_only_nonnegative_net_is_convex(rng):
    net = MonotoneNet([3, 16, 16, 2], min_fraction=0.0, constraint_mode="hard_zero",
                      batch_norm=False, rng=8)
    for layer in net.layers:
        layer.b[...] = rng.normal(scale=0.01, size=layer.b.shape)
    assert convexity_midpoint_test(net, n_triples=10_000, seed=2) == 0.0


# ----------------------------------------------------------------- Lyapunov head


def test_lyapunov_head_hand_value():
    V = LyapunovNet(2, [2], n_heads=2, min_fraction=0.0)
    trunk = V.trunk.layers[0]
    trunk.W[...] = np.eye(2)
    trunk.kinds[...] = LINEAR
    V.W[...] = np.eye(2)
    V.z[...] = [0.0, 0.5]
    # o_h = (1, -1): candidates (1, -0.5)
    assert lyapunov_value(V, np.array([1.0, -1.0])) == 1.0


def test_lyapunov_zero_trunk():
    V = LyapunovNet(3, [4], rng=0)
    V.trunk.layers[0].W[...] = 0.0
    assert V(np.ones((2, 3))).tolist() == [0.0, 0.0]


def test_lyapunov_ties_route_to_lowest_index():
    V = LyapunovNet(2, [2], n_heads=3, min_fraction=0.0)
    V.trunk.layers[0].W[...] = 0.0
    V.trunk.layers[0].b[...] = 1.0
    V.W[...] = 1.0
    V.forward(np.zeros((1, 2)))
    grads, _ = V.backward(np.ones(1))
    np.testing.assert_array_equal(grads[-1], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(grads[-2][1:], 0.0)


def test_lyapunov_gradients(rng):
    V = LyapunovNet(4, [32, 32], rng=9)
    for layer in V.trunk.layers:
        layer.b[...] = rng.normal(scale=0.1, size=layer.b.shape)
    V.z[...] = rng.normal(scale=0.1, size=V.z.shape)
    X, R = rng.normal(size=(20, 4)), rng.normal(size=20)
    assert max_relative_error(V, X, R, training=False) < 1e-4


def test_lyapunov_dimension_mismatch():
    with pytest.raises(ValueError):
        LyapunovNet(3, [4])(np.ones((2, 5)))


def test_dense_layer_param_order():
    layer = DenseLayer(2, 3, np.full(3, MAX_RELU), batch_norm=True)
    assert layer.param_names() == ["W", "b", "gamma", "beta"]
