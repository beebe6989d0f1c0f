import numpy as np
import pytest

from monodyn.dynamics import DatasetSpec, Trajectory, generate_dataset
from monodyn.network import LyapunovNet, MonotoneNet
from monodyn.training import (
    HISTORY_COLUMNS,
    LossBreakdown,
    TrainConfig,
    TrainingDiverged,
    alternating_train,
    build_networks,
    combined_dynamics_loss,
    lyapunov_terms,
    lyapunov_violation_loss,
    train_ensemble,
    window_mse_loss,
    write_history_csv,
)
from monodyn.windows import make_windows, predict_ensemble


class Const:
    """Stand-in network returning a fixed value per call order."""

    def __init__(self, fn):
        self.fn = fn
        self.n_in = 1

    def __call__(self, X):
        return self.fn(np.asarray(X))

    forward = __call__


def small_cfg(**kw):
    base = dict(q=2, hidden=(8,), epochs=30, batch=16, lr_f=1e-3, lr_v=1e-3,
                constraint_mode="hard_zero", batch_norm=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_data(lv_model):
    return generate_dataset(lv_model, DatasetSpec(n_trajectories=3, horizon=200, seed=3))


# ----------------------------------------------------------------- losses


def test_mse_hand_values():
    assert window_mse_loss([[1.0, 2.0]], [[1.0, 2.0]])[0] == 0.0
    assert window_mse_loss([[3.0, 4.0]], [[0.0, 0.0]])[0] == 25.0
    assert window_mse_loss([[3.0, 4.0], [0.0, 0.0]], np.zeros((2, 2)))[0] == 12.5


def test_mse_errors():
    with pytest.raises(ValueError, match="empty"):
        window_mse_loss(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError, match="shape"):
        window_mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_lyapunov_terms_hand_values():
    assert lyapunov_terms(0.0, [1.0], [0.5]).total == 0.0
    parts = lyapunov_terms(0.2, [-0.1], [0.3])
    assert parts.lyapunov_zero == pytest.approx(0.04)
    assert parts.lyapunov_positivity == pytest.approx(0.1)
    assert parts.lyapunov_descent == pytest.approx(0.4)
    assert parts.total == pytest.approx(0.54)
    assert lyapunov_terms(0.0, [0.7], [0.7]).lyapunov_descent == 0.0


def test_lyapunov_violation_loss_uses_newest_state():
    V = LyapunovNet(1, [4], rng=0)
    f = Const(lambda X: X[:, :1] * 0.5)
    windows = np.array([[[1.0], [9.0]], [[2.0], [9.0]]])
    parts = lyapunov_violation_loss(windows, f, V)
    vx, vf = V(np.array([[1.0], [2.0]])), V(np.array([[0.5], [1.0]]))
    ref = lyapunov_terms(V(np.zeros((1, 1)))[0], vx, vf)
    assert parts == ref
    with pytest.raises(ValueError):
        lyapunov_violation_loss(np.zeros((0, 2, 1)), f, V)


def test_combined_loss_adds_descent_hinge():
    V = LyapunovNet(2, [4], rng=1)
    f = Const(lambda X: X[:, :2] + 1.0)
    windows = np.random.default_rng(0).random((5, 1, 2))
    targets = windows[:, 0, :] + 1.0
    vx, vf = V(windows[:, 0, :]), V(windows[:, 0, :] + 1.0)
    expected = np.mean(np.maximum(vf - vx, 0.0))
    assert combined_dynamics_loss(windows, targets, f, V) == pytest.approx(expected)
    with pytest.raises(ValueError):
        combined_dynamics_loss(windows, targets, f, None)


def test_combined_loss_hand_sum():
    # MSE 25 plus a single violation of 0.4
    class Lin:
        n_in = 1

        def forward(self, X):
            return X[:, 0] * 0.4

        __call__ = forward

    f = Const(lambda X: X[:, :1] + 1.0)
    windows = np.array([[[0.0]]])
    targets = np.array([[-4.0]])
    assert combined_dynamics_loss(windows, targets, f, Lin()) == pytest.approx(25.4)
    assert combined_dynamics_loss(windows, np.array([[1.0]]), f, Lin()) == pytest.approx(0.4)


def test_loss_breakdown_finiteness():
    assert LossBreakdown(mse=1.0).is_finite()
    assert not LossBreakdown(mse=np.nan).is_finite()


# ----------------------------------------------------------------- config


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch, cfg.lr_f, cfg.lr_v) == (400_000, 500, 1e-4, 1e-5)
    assert cfg.constraint_mode == "bn_soft" and cfg.hidden == (2000, 2000)
    assert TrainConfig(method="baseline").constraint_mode == "none"
    with pytest.raises(ValueError):
        TrainConfig(method="baseline", constraint_mode="hard_zero")
    with pytest.raises(ValueError):
        TrainConfig(method="mono_only", constraint_mode="none")
    with pytest.raises(ValueError):
        TrainConfig(method="sgd")


# ----------------------------------------------------------------- training loop


def test_zero_epochs_returns_initialization(tiny_data):
    cfg = small_cfg(epochs=0, method="mono_lyap")
    res = alternating_train(tiny_data, cfg)
    f0, V0 = build_networks(4, cfg, np.random.default_rng(cfg.seed))
    for a, b in zip(res.f.params(), f0.params()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(res.V.params(), V0.params()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(tiny_data):
    cfg = small_cfg(method="mono_lyap")
    a, b = alternating_train(tiny_data, cfg), alternating_train(tiny_data, cfg)
    for p, q in zip(a.f.params() + a.V.params(), b.f.params() + b.V.params()):
        assert p.tobytes() == q.tobytes()


@pytest.mark.parametrize("mode", ["hard_zero", "hard_small_random"])
def test_hard_modes_keep_weights_nonnegative(tiny_data, mode):
    seen = []
    res = alternating_train(tiny_data, small_cfg(method="mono_only", constraint_mode=mode, lr_f=0.05),
                            callback=lambda step, parts: seen.append(step))
    assert res.f.is_nonnegative() and seen == list(range(30))


def test_projection_invariant_every_step(tiny_data):
    cfg = small_cfg(method="mono_lyap", lr_f=0.05, epochs=1)
    f, V = None, None
    for _ in range(10):
        res = alternating_train(tiny_data, cfg, f=f, V=V)
        f, V = res.f, res.V
        assert f.is_nonnegative()


def test_parameter_isolation(tiny_data):
    cfg = small_cfg(method="mono_lyap", epochs=1)
    res0 = alternating_train(tiny_data, small_cfg(method="mono_lyap", epochs=0))
    f_before = [p.copy() for p in res0.f.params()]
    V_before = [p.copy() for p in res0.V.params()]
    # V-only update: freeze f by zero learning rate
    res = alternating_train(tiny_data, small_cfg(method="mono_lyap", epochs=1, lr_f=0.0, weight_decay=0.0),
                            f=res0.f.copy(), V=res0.V.copy())
    for a, b in zip(res.f.params(), f_before):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(res.V.params(), V_before))
    res = alternating_train(tiny_data, small_cfg(method="mono_lyap", epochs=1, lr_v=0.0, weight_decay=0.0),
                            f=res0.f.copy(), V=res0.V.copy())
    for a, b in zip(res.V.params(), V_before):
        np.testing.assert_array_equal(a, b)
    assert cfg.update_order == "v_first"


def test_baseline_has_no_lyapunov_terms(tiny_data):
    res = alternating_train(tiny_data, small_cfg(method="baseline", constraint_mode="none"))
    assert res.V is None
    for col in ("lyap_zero", "lyap_pos", "lyap_descent", "lr_v"):
        assert not np.any(res.history[col])


def test_baseline_learns_linear_contraction():
    x = 0.9 ** np.arange(60)[:, None] * np.linspace(0.5, 2.0, 8)[None, :]
    data = [Trajectory(x[:, i:i + 1]) for i in range(8)]
    cfg = TrainConfig(q=1, hidden=(), epochs=5000, batch=64, lr_f=1e-2, lr_v=0.0, method="baseline",
                      weight_decay=0.0, seed=0)
    res = alternating_train(data, cfg)
    slope = float(res.f(np.array([[1.0]]))[0, 0] - res.f(np.array([[0.0]]))[0, 0])
    assert slope == pytest.approx(0.9, abs=0.01)


def test_divergence_is_reported(tiny_data):
    cfg = small_cfg(method="baseline", constraint_mode="none", lr_f=1e300, weight_decay=0.0,
                    standardize=False)
    with np.errstate(all="ignore"), pytest.raises((TrainingDiverged, FloatingPointError)):
        alternating_train(tiny_data, cfg)


def test_training_reduces_loss(tiny_data):
    res = alternating_train(tiny_data, small_cfg(method="mono_lyap", epochs=400, q=1))
    mse = res.history["mse"]
    assert mse[-100:].mean() < mse[:100].mean()


def test_window_tuple_input_and_length_check(tiny_data):
    W, Y = make_windows(tiny_data[0], 3)
    alternating_train((W, Y), small_cfg(q=3, epochs=2))
    with pytest.raises(ValueError, match="q=2"):
        alternating_train((W, Y), small_cfg(q=2, epochs=2))


def test_history_csv(tmp_path, tiny_data):
    res = alternating_train(tiny_data, small_cfg(epochs=3, method="mono_lyap"))
    path = tmp_path / "loss.csv"
    write_history_csv(path, res)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == 4
    assert lines[1].startswith("0,")


def test_explicit_ensemble_training(tiny_data):
    cfg = small_cfg(q=3, epochs=200, method="mono_only", lr_f=1e-2)
    ens = train_ensemble(tiny_data, cfg)
    assert ens.q == 3 and ens.mix.sum() == pytest.approx(1.0)
    assert all(isinstance(m, MonotoneNet) and m.is_nonnegative() for m in ens.members)
    W, Y = make_windows(tiny_data[0], 3)
    pred = np.array([predict_ensemble(w, ens, 1) for w in W[:20]])
    assert np.all(np.isfinite(pred))
