"""Evaluation metrics, property scans and Monte-Carlo checks of the variance bounds."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import Trajectory
from .network import LINEAR, MAX_RELU, LyapunovNet, MonotoneNet
from .windows import WindowEnsemble, flatten_windows, initial_window, meta_step, rollout, stack_windows

VIOLATION_TOL = 1e-9
MIN_TRIALS = 10_000


# --------------------------------------------------------------------------- #
# trajectory errors
# --------------------------------------------------------------------------- #


def _states(x) -> np.ndarray:
    return x.states if isinstance(x, Trajectory) else np.atleast_2d(np.asarray(x, dtype=float))


def normalized_l2_error(pred, truth) -> float:
    """``||pred - truth|| / ||truth||`` over the whole flattened horizon."""
    p, t = _states(pred), _states(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(p - t) / denom)


def per_dimension_errors(pred, truth) -> np.ndarray:
    """Normalized error of every state coordinate separately."""
    p, t = _states(pred), _states(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    denom = np.linalg.norm(t, axis=0)
    if np.any(denom == 0):
        raise ValueError(f"ground truth is identically zero in dimension(s) {np.flatnonzero(denom == 0).tolist()}")
    return np.linalg.norm(p - t, axis=0) / denom


def _window_step(model, q: int, n: int) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, WindowEnsemble):
        return model.one_step
    if hasattr(model, "one_step"):
        return model.one_step
    return meta_step(model)


def rollout_from_trajectory(model, traj, q: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Predict ``T`` steps after the first ``q`` states; returns ``(prediction, truth)``."""
    states = _states(traj)
    if states.shape[0] < q + T:
        raise ValueError(f"trajectory has {states.shape[0]} rows, needs {q + T}")
    pred = rollout(initial_window(states, q), _window_step(model, q, states.shape[1]), T)
    return pred, states[q:q + T]


@dataclass
class BoundCheck:
    name: str
    empirical: float
    bound: float
    passed: bool


@dataclass
class EvalReport:
    """Errors per horizon plus optional property-scan and bound-check results."""

    horizons: list
    total_norm_error: dict
    per_dim_errors: np.ndarray
    monotonicity_violation_rate: float | None = None
    convexity_violation_rate: float | None = None
    descent_fraction: float | None = None
    bound_checks: list = field(default_factory=list)
    trajectory_errors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("monotonicity_violation_rate", "convexity_violation_rate", "descent_fraction"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def evaluate_model(model, trajectories: Sequence, q: int, horizons: Sequence[int]) -> EvalReport:
    """Rollout errors of ``model`` averaged over held-out trajectories.

    For every horizon ``T`` the rollout from the first ``q`` states of each
    trajectory is compared with the truth; per-dimension errors use the
    longest horizon and are returned as ``(n_dim, len(horizons))``.
    """
    horizons = [int(h) for h in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ValueError("horizons must be strictly increasing")
    Tmax = horizons[-1]
    totals = {T: [] for T in horizons}
    per_dim = []
    for tr in trajectories:
        # unstable models may overflow; their error is reported as inf
        with np.errstate(over="ignore", invalid="ignore"):
            pred, truth = rollout_from_trajectory(model, tr, q, Tmax)
            cols = []
            for T in horizons:
                err = normalized_l2_error(pred[:T], truth[:T])
                totals[T].append(err if np.isfinite(err) else np.inf)
                dim = per_dimension_errors(pred[:T], truth[:T])
                cols.append(np.where(np.isfinite(dim), dim, np.inf))
        per_dim.append(np.stack(cols, axis=1))
    return EvalReport(
        horizons=horizons,
        total_norm_error={T: float(np.mean(v)) for T, v in totals.items()},
        per_dim_errors=np.mean(per_dim, axis=0),
        trajectory_errors=totals,
    )


# --------------------------------------------------------------------------- #
# property scans
# --------------------------------------------------------------------------- #


def _box(low, high, n):
    lo = np.broadcast_to(np.asarray(low, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(high, dtype=float), (n,))
    if np.any(hi < lo):
        raise ValueError("domain box needs high >= low")
    return lo, hi


def _n_inputs(net) -> int:
    if hasattr(net, "n_in"):
        return int(net.n_in)
    raise ValueError("cannot infer the input dimension; pass a network with n_in")


def _eval(net, X):
    return np.asarray(net(X), dtype=float).reshape(X.shape[0], -1)


def monotonicity_scan(net, low=0.0, high=1.0, n_pairs: int = 10_000, seed=0,
                      tol: float = VIOLATION_TOL) -> float:
    """Fraction of ordered pairs ``x <= y`` (inside the box) with some ``f(y)_j < f(x)_j - tol``."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n = _n_inputs(net)
    lo, hi = _box(low, high, n)
    rng = np.random.default_rng(seed)
    x = lo + (hi - lo) * rng.random((n_pairs, n))
    y = x + (hi - x) * rng.random((n_pairs, n))
    fx, fy = _eval(net, x), _eval(net, y)
    return float(np.mean(np.any(fy < fx - tol, axis=1)))


def is_max_relu_nonnegative(net: MonotoneNet) -> bool:
    """True when every hidden neuron is max-ReLU and all weights and BN scales are >= 0."""
    hidden = net.layers[:-1] if net.linear_output else net.layers
    kinds_ok = all(np.all(layer.kinds == MAX_RELU) for layer in hidden)
    if net.linear_output:
        kinds_ok = kinds_ok and np.all(net.layers[-1].kinds == LINEAR)
    return bool(kinds_ok and net.is_nonnegative())


def convexity_midpoint_test(net, low=0.0, high=1.0, n_triples: int = 10_000, seed=0,
                            tol: float = VIOLATION_TOL) -> float:
    """Fraction of ``(x1, x2)`` with ``f((x1+x2)/2) > (f(x1)+f(x2))/2 + tol`` in some coordinate.

    The result certifies convexity only for max-ReLU networks with nonnegative
    weights; for anything else it is reported with a warning.
    """
    if isinstance(net, MonotoneNet) and not is_max_relu_nonnegative(net):
        warnings.warn("network is not max-ReLU-only with nonnegative weights; the convexity "
                      "test is informative only", RuntimeWarning, stacklevel=2)
    n = _n_inputs(net)
    lo, hi = _box(low, high, n)
    rng = np.random.default_rng(seed)
    x1 = lo + (hi - lo) * rng.random((n_triples, n))
    x2 = lo + (hi - lo) * rng.random((n_triples, n))
    mid = _eval(net, 0.5 * (x1 + x2))
    chord = 0.5 * (_eval(net, x1) + _eval(net, x2))
    return float(np.mean(np.any(mid > chord + tol, axis=1)))


def lyapunov_descent_check(V: LyapunovNet, f, trajectories: Sequence, q: int) -> float:
    """Fraction of one-step predictions from true windows with ``V(f(window)) < V(x(t))``."""
    if not trajectories:
        raise ValueError("no trajectories given")
    windows, _ = stack_windows(trajectories, q)
    if windows.shape[0] == 0:
        raise ValueError("trajectories yield no windows")
    step = _window_step(f, q, windows.shape[-1])
    nxt = step(windows)
    return float(np.mean(V(nxt) < V(windows[:, 0, :])))


def weight_histogram(net: MonotoneNet, layer=-1, bins: int = 20, value_range=None):
    """Histogram of one layer's weights; ``layer`` is an index or ``"output"``.

    Returns ``(counts, edges)``. Degenerate layers (all weights equal to ``v``)
    use the range ``[v - 0.5, v + 0.5]``.
    """
    if layer == "output":
        layer = -1
    try:
        W = net.layers[layer].W.ravel()
    except (IndexError, TypeError) as exc:
        raise ValueError(f"no layer {layer!r} in a network with {len(net.layers)} layers") from exc
    if value_range is None and W.size and W.min() == W.max():
        value_range = (W.min() - 0.5, W.min() + 0.5)
    return np.histogram(W, bins=bins, range=value_range)


def write_histogram_csv(path, counts, edges) -> None:
    centers = 0.5 * (edges[:-1] + edges[1:])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "count"])
        for c, k in zip(centers, counts):
            w.writerow([repr(float(c)), int(k)])


# --------------------------------------------------------------------------- #
# variance bounds
# --------------------------------------------------------------------------- #


@dataclass
class BoundCheckSpec:
    """Surrogate-system settings for the error-variance bounds.

    ``a`` is the contraction factor of the true scalar map ``x -> a x``; ``b``
    enters only the analytic window bound. Noise is uniform on
    ``[-epsilon, epsilon]`` and drawn afresh at every network application.
    """

    a: float = 1.0
    b: float = 1.0
    epsilon: float = 0.3
    q: int = 10
    T: int = 5
    trials: int = 100_000
    eta: float = 0.0
    n_dim: int = 1
    x0: float = 1.0
    seed: int = 0
    tolerance: float = 0.05

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.trials < 1 or self.q < 1 or self.T < 1:
            raise ValueError("trials, q and T must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def _check_trials(spec: BoundCheckSpec):
    if spec.trials < MIN_TRIALS:
        raise ValueError(f"{spec.trials} trials are too few for a {spec.tolerance:.0%} tolerance "
                         f"(need >= {MIN_TRIALS})")


def lemma2_bound(a: float, epsilon: float, T: int) -> float:
    return float(sum(a ** (2 * (i - 1)) for i in range(1, T + 1)) * epsilon ** 2 / 3.0)


def theorem1_bound(q: int, b: float, epsilon: float) -> float:
    return float((1.0 + (b ** 2 + epsilon ** 2 / 3.0) / q) * epsilon ** 2 / (3.0 * q))


def lemma2_monte_carlo(spec: BoundCheckSpec) -> tuple[np.ndarray, float, bool]:
    """Variance of the ``T``-fold single-step rollout error against its lower bound.

    Returns ``(variance per coordinate, bound, passed)`` where passing means
    every coordinate's variance is at least ``bound * (1 - tolerance)``.
    """
    _check_trials(spec)
    rng = np.random.default_rng(spec.seed)
    x = np.full((spec.trials, spec.n_dim), spec.x0)
    x_hat = x.copy()
    for _ in range(spec.T):
        x = spec.a * x
        x_hat = spec.a * x_hat + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    var = np.var(x - x_hat, axis=0, ddof=1)
    bound = lemma2_bound(spec.a, spec.epsilon, spec.T)
    passed = bool(np.all(var >= bound * (1.0 - spec.tolerance)))
    return var, bound, passed


def theorem1_monte_carlo(spec: BoundCheckSpec, mix=None) -> tuple[np.ndarray, float, bool]:
    """Variance of the ``T``-step windowed rollout error against its upper bound.

    Member ``i`` is ``x -> a**i x + noise`` and the mixing weights default to
    ``1/q``; ``mix`` may override them as long as ``|p_i - 1/q| <= eta``.
    Passing means every coordinate's variance is at most ``bound * (1 + tolerance)``.
    """
    _check_trials(spec)
    q = spec.q
    p = np.full(q, 1.0 / q) if mix is None else np.asarray(mix, dtype=float)
    if p.shape != (q,):
        raise ValueError(f"need {q} mixing weights")
    if np.any(np.abs(p - 1.0 / q) > spec.eta + 1e-12):
        raise ValueError("mixing weights violate |p_i - 1/q| <= eta")
    rng = np.random.default_rng(spec.seed)
    powers = spec.a ** np.arange(1, q + 1)
    # true window x(t), ..., x(t-q+1) of x(s) = a**s x0 with t = q - 1
    hist = spec.x0 * spec.a ** np.arange(q - 1, -1, -1)
    window = np.broadcast_to(hist[None, :, None], (spec.trials, q, spec.n_dim)).copy()
    x_true = hist[0]
    for _ in range(spec.T):
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=(spec.trials, q, spec.n_dim))
        y = np.einsum("i,tin->tn", p * powers, window) + np.einsum("i,tin->tn", p, noise)
        window = np.concatenate([y[:, None, :], window[:, :-1, :]], axis=1)
        x_true = spec.a * x_true
    var = np.var(x_true - window[:, 0, :], axis=0, ddof=1)
    bound = theorem1_bound(q, spec.b, spec.epsilon)
    passed = bool(np.all(var <= bound * (1.0 + spec.tolerance)))
    return var, bound, passed


def window_condition_lhs(q: int, b: float, epsilon: float) -> float:
    return (q + b ** 2 + epsilon ** 2 / 3.0) / q ** 2


def window_condition(q: int, b: float, epsilon: float, a: float, T: int) -> bool:
    """Whether the window bound undercuts the single-step lower bound.

    True iff ``(q + b^2 + eps^2/3) / q^2 <= sum_{i=1..T} a^(2(i-1))``.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    rhs = sum(a ** (2 * (i - 1)) for i in range(1, T + 1))
    return bool(window_condition_lhs(q, b, epsilon) <= rhs)


# --------------------------------------------------------------------------- #
# report tables
# --------------------------------------------------------------------------- #


def write_error_table(path, table: dict, horizons: Sequence[int]) -> None:
    """Rows are horizons, columns ``method:q``; the last column names the row minimum.

    ``table`` maps ``(method, q)`` to ``{horizon: error}``.
    """
    keys = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T"] + [f"{m}:q{q}" for m, q in keys] + ["best"])
        for T in horizons:
            vals = [table[k][T] for k in keys]
            best = keys[int(np.nanargmin(vals))]
            w.writerow([T] + [f"{v:.6g}" for v in vals] + [f"{best[0]}:q{best[1]}"])


def write_per_dim_table(path, per_dim: np.ndarray, horizons: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim"] + [f"T{T}" for T in horizons])
        for d, row in enumerate(np.atleast_2d(per_dim)):
            w.writerow([f"x{d}"] + [f"{v:.6g}" for v in row])


def write_bound_checks(path, checks: Sequence[BoundCheck]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "empirical", "bound", "pass"])
        for c in checks:
            w.writerow([c.name, f"{c.empirical:.10g}", f"{c.bound:.10g}", "pass" if c.passed else "FAIL"])
