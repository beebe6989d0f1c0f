import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monodyn.dynamics import Trajectory
from monodyn.network import MonotoneNet
from monodyn.windows import (
    WindowEnsemble,
    flatten_windows,
    initial_window,
    make_windows,
    meta_step,
    predict_ensemble,
    predict_meta,
    rollout,
    shift_window,
    stack_windows,
)


class Scalar:
    """Callable stand-in for a network: elementwise ``x -> g(x)``."""

    def __init__(self, g):
        self.g = g

    def __call__(self, x):
        return self.g(np.asarray(x, dtype=float))


def traj(rows, n=2):
    return Trajectory(np.arange(rows * n, dtype=float).reshape(rows, n))


# ----------------------------------------------------------------- make_windows


def test_shortest_trajectory_gives_one_pair():
    W, Y = make_windows(traj(4), 3)
    assert W.shape == (1, 3, 2)
    np.testing.assert_array_equal(W[0], traj(4).states[2::-1])
    np.testing.assert_array_equal(Y[0], traj(4).states[3])


def test_q1_pairs_are_consecutive_states():
    t = traj(6)
    W, Y = make_windows(t, 1)
    np.testing.assert_array_equal(W[:, 0], t.states[:-1])
    np.testing.assert_array_equal(Y, t.states[1:])


def test_5001_rows_q100_gives_4901_pairs():
    W, Y = make_windows(np.zeros((5001, 4)), 100)
    assert W.shape == (4901, 100, 4) and Y.shape == (4901, 4)


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(2, 60), q=st.integers(1, 10))
def test_windows_are_newest_first(rows, q):
    if rows < q + 1:
        with pytest.raises(ValueError, match="too short"):
            make_windows(traj(rows), q)
        return
    t = traj(rows)
    W, Y = make_windows(t, q)
    assert len(W) == rows - q
    for m in range(len(W)):
        tt = q - 1 + m
        for i in range(q):
            np.testing.assert_array_equal(W[m, i], t.states[tt - i])
        np.testing.assert_array_equal(Y[m], t.states[tt + 1])


def test_stack_and_flatten():
    W, Y = stack_windows([traj(5), traj(7)], 2)
    assert W.shape == (3 + 5, 2, 2) and Y.shape == (8, 2)
    flat = flatten_windows(W)
    np.testing.assert_array_equal(flat[0], np.concatenate([W[0, 0], W[0, 1]]))


def test_initial_window_and_shift():
    w = initial_window(traj(5), 3)
    np.testing.assert_array_equal(w[:, 0], [4.0, 2.0, 0.0])
    s = shift_window(w, np.array([-1.0, -2.0]))
    np.testing.assert_array_equal(s[:, 0], [-1.0, 4.0, 2.0])


# ----------------------------------------------------------------- ensembles


def test_ensemble_one_step_formula():
    members = [Scalar(lambda x: 2 * x), Scalar(lambda x: x + 1)]
    ens = WindowEnsemble(members, [0.25, 0.75], bias=np.array([0.5]))
    w = np.array([[1.0], [3.0]])
    assert predict_ensemble(w, ens, 1)[0] == pytest.approx(0.25 * 2 + 0.75 * 4 + 0.5)


def test_ensemble_hand_recursion():
    dbl = Scalar(lambda x: 2 * x)
    ens = WindowEnsemble([dbl, dbl], [0.5, 0.5])
    w = np.array([[1.0], [1.0]])
    preds = rollout(w, ens.one_step, 2)
    np.testing.assert_allclose(preds[:, 0], [2.0, 3.0])


def test_ensemble_q1_is_composition():
    net = MonotoneNet([2, 8, 2], constraint_mode="hard_zero", batch_norm=False, rng=0)
    ens = WindowEnsemble([net], [1.0])
    x = np.array([0.3, 0.6])
    y = x
    for _ in range(7):
        y = net(y[None, :])[0]
    assert predict_ensemble(x[None, :], ens, 7).tobytes() == y.tobytes()


def test_ensemble_validation():
    f = Scalar(lambda x: x)
    with pytest.raises(ValueError, match="sum to 1"):
        WindowEnsemble([f, f], [0.5, 0.6])
    with pytest.raises(ValueError, match="mixing weights"):
        WindowEnsemble([f], [0.5, 0.5])
    WindowEnsemble([f, f], [2.0, -1.0], constrained=False)
    ens = WindowEnsemble.from_logits([f, f, f], [0.0, 1.0, 2.0])
    assert ens.mix.sum() == pytest.approx(1.0) and np.all(ens.mix > 0)
    with pytest.raises(ValueError, match="length"):
        ens.one_step(np.zeros((2, 1)))


def test_ensemble_monotonicity_propagates(rng):
    members = [MonotoneNet([2, 8, 2], constraint_mode="hard_zero", batch_norm=False, rng=s) for s in range(3)]
    for m in members:
        for layer in m.layers:
            layer.b[...] = rng.normal(scale=0.01, size=layer.b.shape)
    ens = WindowEnsemble(members, [0.2, 0.3, 0.5], bias=np.array([0.01, 0.0]))
    lo = rng.random((1000, 3, 2))
    hi = lo + rng.random((1000, 3, 2))
    a, b = rollout(lo, ens.one_step, 50), rollout(hi, ens.one_step, 50)
    assert np.all(a <= b + 1e-9)


# ----------------------------------------------------------------- meta network


def test_meta_hand_recursion():
    mean = Scalar(lambda w: w.mean(axis=-1, keepdims=True))
    w = np.array([[4.0], [2.0]])
    np.testing.assert_allclose(rollout(w, meta_step(mean), 2)[:, 0], [3.0, 3.5])


def test_meta_newest_entry_is_fixed_point():
    newest = Scalar(lambda w: w[..., :2])
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(predict_meta(w, newest, 25), [1.0, 2.0])


def test_meta_single_step_and_dimension_check():
    net = MonotoneNet([4, 6, 2], constraint_mode="none", batch_norm=False, rng=1)
    w = np.array([[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_allclose(predict_meta(w, net, 1), net(np.array([[0.1, 0.2, 0.3, 0.4]]))[0])
    with pytest.raises(ValueError, match="expects 4 inputs"):
        predict_meta(np.zeros((3, 2)), net, 1)


def test_rollout_batch_shape():
    f = Scalar(lambda w: 0.5 * w[..., 0, :])
    out = rollout(np.ones((4, 3, 2)), f, 5)
    assert out.shape == (5, 4, 2)
    np.testing.assert_allclose(out[-1], 0.5 ** 5)
    with pytest.raises(ValueError):
        rollout(np.ones((3, 2)), f, 0)
