"""Ground-truth monotone systems: discretized Lotka-Volterra and biochemical circuit.

State layout
------------
Lotka-Volterra states have length ``2 * n_patches`` and are stored patch-major,
so population ``x_{ik}`` (patch ``i``, group ``k``) lives at index ``2 * i + k``.
The biochemical circuit state is ``(x_0, x_1, ..., x_n)`` with ``x_0`` the mRNA
concentration. All indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DIVERGENCE_LIMIT = 1e12


class SimulationDiverged(ArithmeticError):
    """Raised when a trajectory leaves the finite range ``|x| <= 1e12``."""

    def __init__(self, step: int, value: float):
        super().__init__(f"simulation diverged at step {step} (max |x| = {value:.3g})")
        self.step = step
        self.value = value


def _check_state(x, n_dim: int, *, allow_negative: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n_dim,):
        raise ValueError(f"state has dimension {x.shape[-1:] or ()} but the model expects {n_dim}")
    if not allow_negative and np.any(x < 0):
        raise ValueError("state must lie in the positive orthant (all entries >= 0)")
    return x


@dataclass
class Trajectory:
    """Time-indexed states of one rollout, row ``t`` holds ``x(t0 + t)``."""

    states: np.ndarray
    t0: int = 0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.ndim != 2 or self.states.shape[1] < 1:
            raise ValueError("states must be a (T+1, n) matrix with n >= 1")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_dim(self) -> int:
        return self.states.shape[1]

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.states, t0=self.t0)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        return read_trajectory_csv(path)


def write_trajectory_csv(path, states: np.ndarray, t0: int = 0) -> None:
    """Write ``t,x0,x1,...`` rows with 17 significant digits and LF endings."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[1]
    t = np.arange(t0, t0 + states.shape[0])
    header = ",".join(["t"] + [f"x{i}" for i in range(n)])
    with open(Path(path), "w", newline="\n") as fh:
        fh.write(header + "\n")
        for ti, row in zip(t, states):
            fh.write(f"{ti}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    with open(Path(path)) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t" or header[1:] != [f"x{i}" for i in range(len(header) - 1)]:
        raise ValueError(f"{path}: expected header 't,x0,x1,...', got {','.join(header)!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(states=data[:, 1:], t0=int(data[0, 0]) if len(data) else 0)


# --------------------------------------------------------------------------- #
# Lotka-Volterra
# --------------------------------------------------------------------------- #


@dataclass
class LVParams:
    """Rates of the two-group, ``n_patches``-patch cooperative Lotka-Volterra model.

    ``a[j, i, k]`` is the migration rate of group ``k`` from patch ``j`` into
    patch ``i`` (the diagonal ``j == i`` is ignored), ``b[i, k]`` the death rate
    and ``c[i, k]`` the reproduction rate.
    """

    n_patches: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    tau: float = 0.0005

    def __post_init__(self):
        n = int(self.n_patches)
        if n < 1:
            raise ValueError("n_patches must be >= 1")
        self.n_patches = n
        self.a = np.array(self.a, dtype=float).reshape(n, n, 2)
        self.b = np.array(self.b, dtype=float).reshape(n, 2)
        self.c = np.array(self.c, dtype=float).reshape(n, 2)
        idx = np.arange(n)
        self.a[idx, idx, :] = 0.0
        for name in ("a", "b", "c"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"LV rates {name} must be entrywise >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        self.tau = float(self.tau)

    @classmethod
    def random(cls, n_patches: int, rng=None, *, a_range=(0.0, 5.0), b_range=(0.0, 5.0),
               c_range=(0.0, 5.0), tau: float = 0.0005) -> "LVParams":
        """Draw all rates uniformly on the given ranges (default [0, 5] each)."""
        rng = np.random.default_rng(rng)
        n = n_patches
        return cls(
            n_patches=n,
            a=rng.uniform(*a_range, size=(n, n, 2)),
            b=rng.uniform(*b_range, size=(n, 2)),
            c=rng.uniform(*c_range, size=(n, 2)),
            tau=tau,
        )


def _lv_rhs(x: np.ndarray, p: LVParams) -> np.ndarray:
    n = p.n_patches
    xs = x.reshape(x.shape[:-1] + (n, 2))
    partner = xs[..., ::-1]
    growth = p.c * xs * partner - p.b * xs
    # sum_j a[j,i,k] * (x_jk - x_ik); diagonal of a is zero
    inflow = np.einsum("jik,...jk->...ik", p.a, xs)
    outflow = p.a.sum(axis=0) * xs
    return (growth + inflow - outflow).reshape(x.shape)


def lv_step(x, params: LVParams) -> np.ndarray:
    """One discrete Lotka-Volterra step; accepts a single state or a batch ``(..., 2n)``."""
    x = _check_state(x, 2 * params.n_patches)
    return x + params.tau * _lv_rhs(x, params)


def lv_jacobian(x, params: LVParams) -> np.ndarray:
    x = _check_state(x, 2 * params.n_patches, allow_negative=True)
    if x.ndim != 1:
        raise ValueError("jacobian expects a single state vector")
    n, tau = params.n_patches, params.tau
    xs = x.reshape(n, 2)
    J = np.zeros((n, 2, n, 2))
    for i in range(n):
        for k in range(2):
            kb = 1 - k
            J[i, k, i, k] = 1.0 + tau * (params.c[i, k] * xs[i, kb] - params.b[i, k]
                                         - params.a[:, i, k].sum())
            J[i, k, i, kb] = tau * params.c[i, k] * xs[i, k]
            for j in range(n):
                if j != i:
                    J[i, k, j, k] = tau * params.a[j, i, k]
    return J.reshape(2 * n, 2 * n)


def lv_tau_bound(params: LVParams) -> float:
    rate = params.b + params.a.sum(axis=0)  # (i, k): b_ik + sum_{j != i} a_jik
    worst = float(rate.max())
    return np.inf if worst <= 0 else 1.0 / worst


# --------------------------------------------------------------------------- #
# Biochemical control circuit
# --------------------------------------------------------------------------- #


@dataclass
class BCCParams:
    """Enzyme chain ``E_0 -> E_1 -> ... -> E_n`` with end-product feedback on ``E_0``.

    ``alpha[i - 1]`` is the rate of enzyme ``i``; ``K > 1`` and
    ``p_exp`` shape the feedback ``(x_n^p + 1) / (x_n^p + K)``. When ``tau`` is
    omitted it defaults to half the monotonicity bound.
    """

    n_enzymes: int
    alpha: np.ndarray
    K: float = 8.0
    p_exp: int = 10
    tau: float | None = None

    def __post_init__(self):
        n = int(self.n_enzymes)
        if n < 1:
            raise ValueError("n_enzymes must be >= 1")
        self.n_enzymes = n
        self.alpha = np.array(self.alpha, dtype=float).reshape(n)
        if np.any(self.alpha <= 0):
            raise ValueError("all alpha_i must be > 0")
        if not self.K > 1:
            raise ValueError("K must be > 1")
        if int(self.p_exp) != self.p_exp or self.p_exp < 1:
            raise ValueError("p_exp must be an integer >= 1")
        self.p_exp = int(self.p_exp)
        if self.tau is None:
            self.tau = 0.5 / float(self.alpha.max())
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        self.tau = float(self.tau)

    @classmethod
    def random(cls, n_enzymes: int, rng=None, *, alpha_range=(0.0, 10.0), K: float = 8.0,
               p_exp: int = 10, tau: float | None = None) -> "BCCParams":
        rng = np.random.default_rng(rng)
        lo, hi = alpha_range
        # alpha must be strictly positive; uniform draws of exactly 0 are rejected
        alpha = rng.uniform(lo, hi, size=n_enzymes)
        alpha = np.where(alpha > 0, alpha, hi * 1e-6)
        return cls(n_enzymes=n_enzymes, alpha=alpha, K=K, p_exp=p_exp, tau=tau)


def _feedback(xn: np.ndarray, K: float, p: int) -> np.ndarray:
    xp = xn ** p
    return (xp + 1.0) / (xp + K)


def _feedback_slope(xn: np.ndarray, K: float, p: int) -> np.ndarray:
    if p == 1:
        xpm1 = np.ones_like(xn)
    else:
        xpm1 = xn ** (p - 1)
    return p * xpm1 * (K - 1.0) / (xn ** p + K) ** 2


def bcc_step(x, params: BCCParams) -> np.ndarray:
    """One discrete biochemical-circuit step; accepts ``(..., n + 1)`` batches."""
    x = _check_state(x, params.n_enzymes + 1)
    tau, alpha = params.tau, params.alpha
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] + tau * (_feedback(x[..., -1], params.K, params.p_exp)
                                     - alpha[0] * x[..., 0])
    out[..., 1:] = x[..., 1:] + tau * (x[..., :-1] - alpha * x[..., 1:])
    return out


def bcc_jacobian(x, params: BCCParams) -> np.ndarray:
    n = params.n_enzymes
    x = _check_state(x, n + 1, allow_negative=True)
    if x.ndim != 1:
        raise ValueError("jacobian expects a single state vector")
    tau, alpha = params.tau, params.alpha
    J = np.zeros((n + 1, n + 1))
    J[0, 0] = 1.0 - tau * alpha[0]
    J[0, n] += tau * float(_feedback_slope(np.asarray(x[n]), params.K, params.p_exp))
    for i in range(1, n + 1):
        J[i, i] = 1.0 - tau * alpha[i - 1]
        J[i, i - 1] = tau
    return J


def bcc_tau_bound(params: BCCParams) -> float:
    worst = float(params.alpha.max())
    return np.inf if worst <= 0 else 1.0 / worst


# --------------------------------------------------------------------------- #
# Generic model wrapper
# --------------------------------------------------------------------------- #


class SystemModel:
    """Common surface for the shipped systems: ``step``, ``jacobian``, ``tau_bound``."""

    name = "system"
    n_dim: int

    def step(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def tau_bound(self) -> float:
        raise NotImplementedError

    def equilibrium(self) -> np.ndarray:
        return np.zeros(self.n_dim)

    @property
    def is_monotone(self) -> bool:
        return self.params.tau < self.tau_bound()

    def with_tau(self, tau: float) -> "SystemModel":
        raise NotImplementedError


class LotkaVolterra(SystemModel):
    name = "lv"

    def __init__(self, params: LVParams):
        self.params = params
        self.n_dim = 2 * params.n_patches

    def step(self, x):
        return lv_step(x, self.params)

    def jacobian(self, x):
        return lv_jacobian(x, self.params)

    def tau_bound(self):
        return lv_tau_bound(self.params)

    def with_tau(self, tau):
        p = self.params
        return LotkaVolterra(LVParams(p.n_patches, p.a, p.b, p.c, tau=tau))

    def __repr__(self):
        return f"LotkaVolterra(n_patches={self.params.n_patches}, tau={self.params.tau:g})"


class BiochemicalCircuit(SystemModel):
    name = "bcc"

    def __init__(self, params: BCCParams):
        self.params = params
        self.n_dim = params.n_enzymes + 1

    def step(self, x):
        return bcc_step(x, self.params)

    def jacobian(self, x):
        return bcc_jacobian(x, self.params)

    def tau_bound(self):
        return bcc_tau_bound(self.params)

    def with_tau(self, tau):
        p = self.params
        return BiochemicalCircuit(BCCParams(p.n_enzymes, p.alpha, p.K, p.p_exp, tau=tau))

    def equilibrium(self, tol: float = 1e-14) -> np.ndarray:
        """Unique positive fixed point, found by bisection on the end-product level.

        At a fixed point ``x_0 = g(x_n) / alpha_1`` and ``x_i = x_{i-1} / alpha_i``,
        so ``x_n = g(x_n) / (alpha_1 * prod(alpha))``; the residual is increasing
        in ``x_n`` because ``g`` is bounded in ``[1/K, 1)``.
        """
        p = self.params
        prod = float(p.alpha[0] * np.prod(p.alpha))

        def resid(u):
            return u - _feedback(np.asarray(u), p.K, p.p_exp) / prod

        lo, hi = 0.0, 1.0 / prod + 1.0
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if resid(mid) > 0:
                hi = mid
            else:
                lo = mid
        xn = 0.5 * (lo + hi)
        x = np.empty(p.n_enzymes + 1)
        x[0] = float(_feedback(np.asarray(xn), p.K, p.p_exp)) / p.alpha[0]
        for i in range(1, p.n_enzymes + 1):
            x[i] = x[i - 1] / p.alpha[i - 1]
        return x

    def __repr__(self):
        return f"BiochemicalCircuit(n_enzymes={self.params.n_enzymes}, tau={self.params.tau:g})"


def make_model(params) -> SystemModel:
    if isinstance(params, LVParams):
        return LotkaVolterra(params)
    if isinstance(params, BCCParams):
        return BiochemicalCircuit(params)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def jacobian(model: SystemModel, x) -> np.ndarray:
    """Analytic Jacobian of the one-step map at ``x``."""
    return model.jacobian(x)


def tau_bound(model: SystemModel) -> float:
    """Supremum of monotonicity-preserving time steps (``inf`` if unconstrained)."""
    return model.tau_bound()


def simulate(model: SystemModel, x0, T: int) -> Trajectory:
    """Iterate the step map ``T`` times from ``x0``.

    ``x0`` may also be a batch ``(B, n)``; the result is then a ``(T+1, B, n)``
    array instead of a :class:`Trajectory`.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    x = _check_state(x0, model.n_dim).copy()
    out = np.empty((T + 1,) + x.shape)
    out[0] = x
    p = model.params
    rhs = _lv_rhs if isinstance(model, LotkaVolterra) else None
    for t in range(1, T + 1):
        if rhs is not None:
            x = x + p.tau * rhs(x, p)
        else:
            x = _bcc_step_unchecked(x, p)
        peak = np.max(np.abs(x)) if x.size else 0.0
        if not np.isfinite(peak) or peak > DIVERGENCE_LIMIT:
            raise SimulationDiverged(t, float(peak))
        out[t] = x
    if out.ndim == 2:
        return Trajectory(out)
    return out


def _bcc_step_unchecked(x, p: BCCParams):
    out = np.empty_like(x)
    # negative concentrations only arise above the tau bound; clamp the power base
    out[..., 0] = x[..., 0] + p.tau * (_feedback(np.abs(x[..., -1]), p.K, p.p_exp)
                                       - p.alpha[0] * x[..., 0])
    out[..., 1:] = x[..., 1:] + p.tau * (x[..., :-1] - p.alpha * x[..., 1:])
    return out


@dataclass
class DatasetSpec:
    """How many trajectories to roll out, how long, and where they start.

    Initial states are drawn entrywise uniformly on ``[init_low, init_high]``
    from a stream derived from ``(seed, trajectory index)``.
    """

    n_trajectories: int = 20
    horizon: int = 5000
    init_low: float = 0.0
    init_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not 0 <= self.init_low <= self.init_high:
            raise ValueError("initial-state range must satisfy 0 <= init_low <= init_high")


def sample_initial_states(n_dim: int, spec: DatasetSpec) -> np.ndarray:
    rows = []
    for idx in range(spec.n_trajectories):
        rng = np.random.default_rng([spec.seed, idx])
        rows.append(rng.uniform(spec.init_low, spec.init_high, size=n_dim))
    return np.array(rows)


def generate_dataset(model: SystemModel, spec: DatasetSpec) -> list[Trajectory]:
    x0 = sample_initial_states(model.n_dim, spec)
    states = simulate(model, x0, spec.horizon)
    return [Trajectory(states[:, i, :].copy()) for i in range(spec.n_trajectories)]


def finite_difference_jacobian(step, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``step`` at ``x`` (test oracle)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h * max(1.0, abs(x[j]))
        cols.append((step(x + e) - step(x - e)) / (2 * e[j]))
    return np.stack(cols, axis=1)


def ordered(x: np.ndarray, y: np.ndarray, slack: float = 1e-9) -> np.ndarray:
    """Entrywise ``x <= y`` over the last axis, up to ``slack``."""
    return np.all(np.asarray(x) <= np.asarray(y) + slack, axis=-1)


__all__: Sequence[str] = [
    "Trajectory", "LVParams", "BCCParams", "DatasetSpec", "SystemModel", "LotkaVolterra",
    "BiochemicalCircuit", "SimulationDiverged", "lv_step", "bcc_step", "jacobian",
    "tau_bound", "simulate", "generate_dataset", "make_model", "finite_difference_jacobian",
    "write_trajectory_csv", "read_trajectory_csv", "ordered",
]
