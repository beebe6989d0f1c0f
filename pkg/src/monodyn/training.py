"""Window regression losses, Lyapunov violation penalties and alternating training.

Three methods are supported:

``mono_lyap``
    constrained dynamics net plus a Lyapunov net; each step first fits the
    Lyapunov net to the current dynamics, then fits the dynamics to the data
    while penalising any increase of the Lyapunov value along its predictions.
``mono_only``
    constrained dynamics net trained on the window MSE alone.
``baseline``
    unconstrained net, plain MSE.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .network import HARD_MODES, LyapunovNet, MonotoneNet
from .optim import OptimizerState, adam_step
from .windows import WindowEnsemble, flatten_windows, stack_windows

logger = logging.getLogger(__name__)

METHODS = ("mono_lyap", "mono_only", "baseline")
HISTORY_COLUMNS = ("step", "mse", "lyap_zero", "lyap_pos", "lyap_descent", "lr_f", "lr_v")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class LossBreakdown:
    mse: float = 0.0
    lyapunov_zero: float = 0.0
    lyapunov_positivity: float = 0.0
    lyapunov_descent: float = 0.0

    @property
    def total(self) -> float:
        return self.mse + self.lyapunov_zero + self.lyapunov_positivity + self.lyapunov_descent

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


@dataclass
class TrainConfig:
    """Hyper-parameters of :func:`alternating_train`.

    ``epochs`` counts optimisation steps, each on a batch of ``batch`` window
    pairs drawn (by default with replacement) from the whole dataset.
    ``constraint_mode=None`` resolves to ``"bn_soft"`` for the monotone methods
    and ``"none"`` for the baseline. ``equilibrium`` is the point where the
    Lyapunov net is pinned to zero (origin when None).
    """

    q: int = 1
    hidden: Sequence[int] = (2000, 2000)
    epochs: int = 400_000
    batch: int = 500
    lr_f: float = 1e-4
    lr_v: float = 1e-5
    decay_rate: float = 0.98
    decay_interval: int = 250
    weight_decay: float = 0.01
    decay_style: str = "decoupled"
    method: str = "mono_lyap"
    constraint_mode: str | None = None
    batch_norm: bool | None = None
    min_fraction: float = 0.5
    v_hidden: Sequence[int] | None = None
    v_constraint_mode: str = "none"
    update_order: str = "v_first"
    equilibrium: Sequence[float] | None = None
    replace: bool = True
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if self.update_order not in ("v_first", "f_first"):
            raise ValueError("update_order must be 'v_first' or 'f_first'")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.v_hidden is not None:
            self.v_hidden = tuple(int(h) for h in self.v_hidden)
        if self.constraint_mode is None:
            self.constraint_mode = "none" if self.method == "baseline" else "bn_soft"
        if self.method == "baseline" and self.constraint_mode != "none":
            raise ValueError("the baseline method trains an unconstrained net (constraint_mode='none')")
        if self.method != "baseline" and self.constraint_mode == "none":
            raise ValueError(f"method {self.method!r} needs a monotonicity constraint mode")

    @property
    def uses_lyapunov(self) -> bool:
        return self.method == "mono_lyap"


@dataclass
class TrainResult:
    f: MonotoneNet
    V: LyapunovNet | None
    history: dict = field(default_factory=dict)
    f_state: OptimizerState | None = None
    v_state: OptimizerState | None = None

    def history_rows(self):
        cols = [self.history[c] for c in HISTORY_COLUMNS]
        return zip(*cols)


# --------------------------------------------------------------------------- #
# losses
# --------------------------------------------------------------------------- #


def window_mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared Euclidean error over the batch and its gradient w.r.t. ``pred``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    return loss, 2.0 * diff / pred.shape[0]


def lyapunov_terms(v_zero, v_x, v_f) -> LossBreakdown:
    """Penalties ``V(0)^2``, mean ``[-V(x)]^+`` and mean ``[V(f) - V(x)]^+``."""
    v_x = np.atleast_1d(np.asarray(v_x, dtype=float))
    v_f = np.atleast_1d(np.asarray(v_f, dtype=float))
    if v_x.size == 0:
        raise ValueError("empty batch")
    return LossBreakdown(
        lyapunov_zero=float(np.asarray(v_zero, dtype=float).reshape(-1)[0] ** 2),
        lyapunov_positivity=float(np.mean(np.maximum(-v_x, 0.0))),
        lyapunov_descent=float(np.mean(np.maximum(v_f - v_x, 0.0))),
    )


def lyapunov_violation_loss(windows, f, V: LyapunovNet, equilibrium=None) -> LossBreakdown:
    """Lyapunov penalties of ``V`` along one-step predictions of ``f`` from ``windows``."""
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError("expected a nonempty (B, q, n) batch of windows")
    n = windows.shape[-1]
    if V.n_in != n:
        raise ValueError(f"Lyapunov net takes {V.n_in} inputs, states have {n}")
    eq = np.zeros(n) if equilibrium is None else np.asarray(equilibrium, dtype=float)
    x = windows[:, 0, :]
    fx = np.asarray(f(flatten_windows(windows)), dtype=float)
    vals = V.forward(np.vstack([eq[None, :], x, fx]))
    B = x.shape[0]
    return lyapunov_terms(vals[0], vals[1:B + 1], vals[B + 1:])


def combined_dynamics_loss(windows, targets, f, V: LyapunovNet | None) -> float:
    """Window MSE plus mean ``[V(f(window)) - V(x(t))]^+``."""
    if V is None:
        raise ValueError("combined loss needs a Lyapunov net")
    windows = np.asarray(windows, dtype=float)
    pred = np.asarray(f(flatten_windows(windows)), dtype=float)
    mse, _ = window_mse_loss(pred, targets)
    vals = V.forward(np.vstack([windows[:, 0, :], pred]))
    B = windows.shape[0]
    return mse + float(np.mean(np.maximum(vals[B:] - vals[:B], 0.0)))


# --------------------------------------------------------------------------- #
# per-step updates
# --------------------------------------------------------------------------- #


def _lyapunov_update(V: LyapunovNet, v_state: OptimizerState, x, fx, eq) -> LossBreakdown:
    B = x.shape[0]
    vals = V.forward(np.vstack([eq[None, :], x, fx]), training=True)
    v0, vx, vf = vals[0], vals[1:B + 1], vals[B + 1:]
    parts = lyapunov_terms(v0, vx, vf)
    g = np.zeros_like(vals)
    g[0] = 2.0 * v0
    pos = (-vx > 0).astype(float) / B
    desc = (vf - vx > 0).astype(float) / B
    g[1:B + 1] = -pos - desc
    g[B + 1:] = desc
    grads, _ = V.backward(g)
    if parts.is_finite():
        adam_step(v_state, V.params(), grads, V.param_names())
    return parts


def _dynamics_update(f: MonotoneNet, f_state: OptimizerState, W, Y, V, cfg, rng) -> LossBreakdown:
    pred = f.forward(W, training=True)
    mse, dpred = window_mse_loss(pred, Y)
    parts = LossBreakdown(mse=mse)
    if V is not None:
        B = W.shape[0]
        n = Y.shape[1]
        # V is frozen here: only the input gradient is used
        vals = V.forward(np.vstack([W[:, :n], pred]), training=True)
        hinge = vals[B:] - vals[:B]
        parts.lyapunov_descent = float(np.mean(np.maximum(hinge, 0.0)))
        g = np.zeros_like(vals)
        g[B:] = (hinge > 0).astype(float) / B
        _, dinput = V.backward(g)
        dpred = dpred + dinput[B:]
    grads, _ = f.backward(dpred)
    if parts.is_finite():
        adam_step(f_state, f.params(), grads, f.param_names())
        if f.constraint_mode in HARD_MODES:
            f.project_nonnegative(rng)
    return parts


def build_networks(n_dim: int, cfg: TrainConfig, rng) -> tuple[MonotoneNet, LyapunovNet | None]:
    f = MonotoneNet([cfg.q * n_dim, *cfg.hidden, n_dim], min_fraction=cfg.min_fraction,
                    constraint_mode=cfg.constraint_mode, batch_norm=cfg.batch_norm, rng=rng)
    if f.constraint_mode in HARD_MODES:
        f.project_nonnegative(rng)
    V = None
    if cfg.uses_lyapunov:
        V = LyapunovNet(n_dim, cfg.v_hidden or cfg.hidden, n_heads=n_dim,
                        min_fraction=cfg.min_fraction, constraint_mode=cfg.v_constraint_mode,
                        batch_norm=False, rng=rng)
    return f, V


def _center_lyapunov_inputs(V: LyapunovNet, states: np.ndarray, eq: np.ndarray) -> None:
    """Scale V's inputs around the equilibrium, which then maps to the trunk origin.

    With zero biases the freshly built V is exactly 0 there, so the pinning
    penalty starts satisfied and V grows away from the equilibrium.
    """
    rms = np.sqrt(np.mean((states - eq) ** 2, axis=0))
    V.trunk.in_shift = eq.copy()
    V.trunk.in_scale = np.where(rms > 0, rms, 1.0)


def _optimizer(cfg: TrainConfig, lr: float) -> OptimizerState:
    return OptimizerState(base_lr=lr, decay_rate=cfg.decay_rate, decay_interval=cfg.decay_interval,
                          weight_decay=cfg.weight_decay, decay_style=cfg.decay_style)


def alternating_train(dataset, cfg: TrainConfig, f: MonotoneNet | None = None,
                      V: LyapunovNet | None = None, callback=None) -> TrainResult:
    """Train the dynamics net (and, for ``mono_lyap``, its Lyapunov net).

    Parameters
    ----------
    dataset : list of Trajectory or (windows, targets) tuple
    cfg : TrainConfig
    f, V : optional networks to continue training; built from ``cfg`` otherwise.
    callback : callable(step, LossBreakdown), optional

    Returns
    -------
    TrainResult
    """
    rng = np.random.default_rng(cfg.seed)
    if isinstance(dataset, tuple):
        windows, targets = dataset
    else:
        windows, targets = stack_windows(dataset, cfg.q)
    if windows.shape[1] != cfg.q:
        raise ValueError(f"windows have length {windows.shape[1]}, config says q={cfg.q}")
    n = targets.shape[1]
    X_all = flatten_windows(windows)
    eq = np.zeros(n) if cfg.equilibrium is None else np.asarray(cfg.equilibrium, dtype=float)
    if f is None:
        f, V_new = build_networks(n, cfg, rng)
        V = V if V is not None else V_new
        if cfg.standardize:
            f.set_scaling(X_all, targets)
            if V is not None:
                _center_lyapunov_inputs(V, X_all[:, :n], eq)
    if cfg.uses_lyapunov and V is None:
        raise ValueError("mono_lyap training needs a Lyapunov net")
    if not cfg.uses_lyapunov:
        V = None
    f_state = _optimizer(cfg, cfg.lr_f)
    v_state = _optimizer(cfg, cfg.lr_v)
    hist = {c: np.zeros(cfg.epochs) for c in HISTORY_COLUMNS}
    hist["step"] = np.arange(cfg.epochs)
    M = X_all.shape[0]
    for step in range(cfg.epochs):
        if cfg.replace:
            idx = rng.integers(0, M, size=cfg.batch)
        else:
            idx = rng.choice(M, size=min(cfg.batch, M), replace=False)
        W, Y = X_all[idx], targets[idx]
        lr_f, lr_v = f_state.lr, v_state.lr
        vparts = LossBreakdown()
        if V is not None and cfg.update_order == "v_first":
            fx = f.forward(W, training=True, update_running=False)
            vparts = _lyapunov_update(V, v_state, W[:, :n], fx, eq)
        parts = _dynamics_update(f, f_state, W, Y, V, cfg, rng)
        if V is not None and cfg.update_order == "f_first":
            fx = f.forward(W, training=True, update_running=False)
            vparts = _lyapunov_update(V, v_state, W[:, :n], fx, eq)
        parts.lyapunov_zero = vparts.lyapunov_zero
        parts.lyapunov_positivity = vparts.lyapunov_positivity
        if V is not None:
            parts.lyapunov_descent = vparts.lyapunov_descent
        if not (parts.is_finite() and vparts.is_finite()):
            raise TrainingDiverged(step, parts)
        hist["mse"][step] = parts.mse
        hist["lyap_zero"][step] = parts.lyapunov_zero
        hist["lyap_pos"][step] = parts.lyapunov_positivity
        hist["lyap_descent"][step] = parts.lyapunov_descent
        hist["lr_f"][step] = lr_f
        hist["lr_v"][step] = lr_v if V is not None else 0.0
        if callback is not None:
            callback(step, parts)
    return TrainResult(f=f, V=V, history=hist, f_state=f_state, v_state=v_state)


def write_history_csv(path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in result.history_rows():
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


# --------------------------------------------------------------------------- #
# explicit ensemble
# --------------------------------------------------------------------------- #


def train_ensemble(dataset, cfg: TrainConfig, with_bias: bool = True) -> WindowEnsemble:
    """Jointly fit ``q`` single-state members and softmax mixing weights on the window MSE.

    Member ``i`` sees the state ``i`` steps old; the mixing weights stay on the
    simplex through their softmax parameterisation.
    """
    rng = np.random.default_rng(cfg.seed)
    windows, targets = dataset if isinstance(dataset, tuple) else stack_windows(dataset, cfg.q)
    q, n = windows.shape[1], windows.shape[2]
    members = [MonotoneNet([n, *cfg.hidden, n], min_fraction=cfg.min_fraction,
                           constraint_mode=cfg.constraint_mode, batch_norm=cfg.batch_norm, rng=rng)
               for _ in range(q)]
    logits = np.zeros(q)
    bias = np.zeros(n)
    states = [_optimizer(cfg, cfg.lr_f) for _ in range(q)]
    mix_state = _optimizer(cfg, cfg.lr_f)
    M = windows.shape[0]
    for step in range(cfg.epochs):
        idx = rng.integers(0, M, size=cfg.batch)
        Wb, Y = windows[idx], targets[idx]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        outs = [m.forward(Wb[:, i, :], training=True) for i, m in enumerate(members)]
        pred = sum(pi * o for pi, o in zip(p, outs)) + (bias if with_bias else 0.0)
        mse, dpred = window_mse_loss(pred, Y)
        if not np.isfinite(mse):
            raise TrainingDiverged(step, LossBreakdown(mse=mse))
        for i, m in enumerate(members):
            grads, _ = m.backward(p[i] * dpred)
            adam_step(states[i], m.params(), grads, m.param_names())
            if m.constraint_mode in HARD_MODES:
                m.project_nonnegative(rng)
        dp = np.array([np.sum(dpred * o) for o in outs])
        dlogits = p * (dp - np.dot(p, dp))
        mix_params = [logits, bias] if with_bias else [logits]
        mix_grads = [dlogits, dpred.sum(axis=0)] if with_bias else [dlogits]
        adam_step(mix_state, mix_params, mix_grads)
    return WindowEnsemble.from_logits(members, logits, bias=bias if with_bias else None)
