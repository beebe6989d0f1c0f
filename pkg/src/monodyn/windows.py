"""q-windows of past states and recursive multi-step prediction.

A window is a ``(q, n)`` array ordered newest-first: row 0 is ``x(t)`` and row
``q - 1`` is ``x(t - q + 1)``. Batches of windows are ``(B, q, n)``. After each
prediction step the oldest row is dropped and the prediction becomes row 0, so
ensemble member ``i`` always sees the state that is ``i`` steps old.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import Trajectory


def make_windows(traj, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Training pairs ``(x(t), ..., x(t-q+1)) -> x(t+1)`` for every ``t`` in ``[q-1, H-1]``.

    ``H`` is the trajectory horizon (number of rows minus one), so a trajectory
    with ``R`` rows yields ``R - q`` pairs.

    Returns
    -------
    windows : ndarray, shape (R - q, q, n)
    targets : ndarray, shape (R - q, n)
    """
    states = traj.states if isinstance(traj, Trajectory) else np.atleast_2d(np.asarray(traj, float))
    q = int(q)
    if q < 1:
        raise ValueError("window length q must be >= 1")
    rows = states.shape[0]
    if rows < q + 1:
        raise ValueError(f"trajectory with {rows} rows is too short for q={q} (needs >= {q + 1})")
    n_pairs = rows - q
    # window for t = q-1+m holds rows t, t-1, ..., t-q+1
    idx = (q - 1 + np.arange(n_pairs))[:, None] - np.arange(q)[None, :]
    return states[idx], states[q:]


def stack_windows(trajectories: Sequence, q: int) -> tuple[np.ndarray, np.ndarray]:
    parts = [make_windows(tr, q) for tr in trajectories]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def initial_window(traj, q: int) -> np.ndarray:
    """Newest-first window built from the first ``q`` rows of a trajectory."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, float)
    if states.shape[0] < q:
        raise ValueError("trajectory shorter than the window")
    return states[:q][::-1].copy()


def flatten_windows(windows: np.ndarray) -> np.ndarray:
    """``(..., q, n)`` -> ``(..., q * n)`` keeping newest-first order."""
    w = np.asarray(windows, dtype=float)
    return w.reshape(w.shape[:-2] + (w.shape[-2] * w.shape[-1],))


def shift_window(window: np.ndarray, new_state: np.ndarray) -> np.ndarray:
    """Drop the oldest state and insert ``new_state`` at the newest position."""
    new_state = np.asarray(new_state, dtype=float)[..., None, :]
    return np.concatenate([new_state, window[..., :-1, :]], axis=-2)


@dataclass
class WindowEnsemble:
    """Explicit ensemble ``sum_i p_i f_i(x(t - i + 1)) + z``.

    ``members`` are callables mapping ``(B, n) -> (B, n)`` (typically
    :class:`~monodyn.network.MonotoneNet`). With ``constrained=True`` the mixing
    weights must lie on the probability simplex.
    """

    members: list
    mix: np.ndarray
    bias: np.ndarray | None = None
    constrained: bool = True
    n_dim: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mix = np.asarray(self.mix, dtype=float).reshape(-1)
        if len(self.members) != self.mix.size:
            raise ValueError(f"{len(self.members)} members but {self.mix.size} mixing weights")
        if self.constrained:
            if np.any(self.mix < 0) or abs(self.mix.sum() - 1.0) > 1e-9:
                raise ValueError("constrained mixing weights must be >= 0 and sum to 1")
        dims = {getattr(m, "n_in", None) for m in self.members} | \
               {getattr(m, "n_out", None) for m in self.members}
        dims.discard(None)
        if len(dims) > 1:
            raise ValueError(f"ensemble members disagree on state dimension: {sorted(dims)}")
        if dims and self.n_dim is None:
            self.n_dim = dims.pop()
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)

    @property
    def q(self) -> int:
        return len(self.members)

    @classmethod
    def from_logits(cls, members, logits, bias=None) -> "WindowEnsemble":
        logits = np.asarray(logits, dtype=float)
        p = np.exp(logits - logits.max())
        return cls(members=list(members), mix=p / p.sum(), bias=bias)

    def one_step(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        if windows.shape[-2] != self.q:
            raise ValueError(f"window has length {windows.shape[-2]}, ensemble expects {self.q}")
        if self.n_dim is not None and windows.shape[-1] != self.n_dim:
            raise ValueError(f"window states have dimension {windows.shape[-1]}, expected {self.n_dim}")
        out = sum(p * np.asarray(member(windows[..., i, :]), dtype=float)
                  for i, (p, member) in enumerate(zip(self.mix, self.members)))
        if self.bias is not None:
            out = out + self.bias
        return out


def rollout(window, step: Callable[[np.ndarray], np.ndarray], T: int) -> np.ndarray:
    """All ``T`` recursive predictions ``x_hat(t+1), ..., x_hat(t+T)``.

    ``window`` is ``(q, n)`` or a batch ``(B, q, n)``; ``step`` maps windows to
    the next state. The result is ``(T, n)`` or ``(T, B, n)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    w = np.asarray(window, dtype=float)
    if w.ndim < 2:
        raise ValueError("window must be at least 2-D (q, n)")
    out = np.empty((T,) + w.shape[:-2] + w.shape[-1:])
    for d in range(T):
        y = step(w)
        out[d] = y
        w = shift_window(w, y)
    return out


def predict_ensemble(window, ens: WindowEnsemble, T: int) -> np.ndarray:
    """``x_hat(t+T)`` by recursing the ensemble ``T`` times."""
    return rollout(window, ens.one_step, T)[-1]


def meta_step(meta) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a network over flattened ``q * n`` windows as a window -> state map."""

    def step(w: np.ndarray) -> np.ndarray:
        flat = flatten_windows(w)
        if hasattr(meta, "n_in") and flat.shape[-1] != meta.n_in:
            raise ValueError(f"meta network expects {meta.n_in} inputs, window gives {flat.shape[-1]}")
        if flat.ndim == 1:
            return np.asarray(meta(flat[None, :]))[0]
        return np.asarray(meta(flat))

    return step


def predict_meta(window, meta, T: int) -> np.ndarray:
    """``x_hat(t+T)`` by recursing a meta-network over the flattened window."""
    return rollout(window, meta_step(meta), T)[-1]
