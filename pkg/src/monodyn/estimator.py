"""scikit-learn compatible wrapper around :func:`~monodyn.training.alternating_train`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .training import TrainConfig, alternating_train
from .windows import meta_step, rollout, stack_windows


class MonotoneDynamicsRegressor(RegressorMixin, BaseEstimator):
    """Learn ``x(t+1)`` from the flattened newest-first window ``(x(t), ..., x(t-q+1))``.

    ``fit(X, y)`` takes ``X`` of shape ``(n_samples, q * n)`` and ``y`` of
    shape ``(n_samples, n)``; :meth:`fit_trajectories` builds those pairs from
    whole trajectories. All constructor arguments mirror :class:`TrainConfig`.

    Examples
    --------
    >>> est = MonotoneDynamicsRegressor(q=1, hidden=(16,), epochs=50, batch=32,
    ...                                 method="mono_only", constraint_mode="hard_zero")
    >>> X = np.random.default_rng(0).random((200, 2)); y = 0.5 * X
    >>> est.fit(X, y).predict(X[:3]).shape
    (3, 2)
    """

    def __init__(self, q=1, hidden=(128, 128), method="mono_lyap", epochs=20_000, batch=500,
                 lr_f=1e-3, lr_v=1e-4, weight_decay=0.01, constraint_mode="hard_zero",
                 batch_norm=False, min_fraction=0.5, v_hidden=None, equilibrium=None,
                 standardize=True, random_state=0):
        self.q = q
        self.hidden = hidden
        self.method = method
        self.epochs = epochs
        self.batch = batch
        self.lr_f = lr_f
        self.lr_v = lr_v
        self.weight_decay = weight_decay
        self.constraint_mode = constraint_mode
        self.batch_norm = batch_norm
        self.min_fraction = min_fraction
        self.v_hidden = v_hidden
        self.equilibrium = equilibrium
        self.standardize = standardize
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        mode = "none" if self.method == "baseline" else self.constraint_mode
        return TrainConfig(q=self.q, hidden=self.hidden, method=self.method, epochs=self.epochs,
                           batch=self.batch, lr_f=self.lr_f, lr_v=self.lr_v,
                           weight_decay=self.weight_decay, constraint_mode=mode,
                           batch_norm=self.batch_norm, min_fraction=self.min_fraction,
                           v_hidden=self.v_hidden, equilibrium=self.equilibrium,
                           standardize=self.standardize, seed=self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        n = y.shape[1]
        if X.shape[1] != self.q * n:
            raise ValueError(f"X has {X.shape[1]} columns; q={self.q} windows of {n}-dim states need {self.q * n}")
        windows = X.reshape(len(X), self.q, n)
        res = alternating_train((windows, y), self._config())
        self.f_, self.V_, self.history_ = res.f, res.V, res.history
        self.n_features_in_ = X.shape[1]
        self.n_dim_ = n
        return self

    def fit_trajectories(self, trajectories):
        """Fit on every window/target pair of a list of trajectories."""
        windows, targets = stack_windows(trajectories, self.q)
        return self.fit(windows.reshape(len(windows), -1), targets)

    def predict(self, X):
        check_is_fitted(self, "f_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.f_.predict(X)

    def rollout(self, window, T: int):
        """``T`` recursive predictions from a newest-first ``(q, n)`` window."""
        check_is_fitted(self, "f_")
        window = check_array(window)
        return rollout(window, meta_step(self.f_), T)

    def lyapunov(self, X):
        """Learned Lyapunov values of states ``X`` (``mono_lyap`` only)."""
        check_is_fitted(self, "f_")
        if self.V_ is None:
            raise AttributeError(f"method {self.method!r} trains no Lyapunov function")
        return self.V_(check_array(X))
