"""Dense networks with max/min-ReLU neurons, nonnegative-weight projection and a max head.

Everything here is plain numpy with hand-written backpropagation. A network
is a list of :class:`DenseLayer`; each neuron carries its own activation kind so
max-ReLU and min-ReLU units can share a layer.
"""

from __future__ import annotations

import copy
import warnings
from typing import Sequence

import numpy as np

LINEAR, MAX_RELU, MIN_RELU = 0, 1, 2
ACTIVATION_CODES = {"linear": LINEAR, "max_relu": MAX_RELU, "min_relu": MIN_RELU}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}
CONSTRAINT_MODES = ("hard_zero", "hard_small_random", "bn_soft", "none")
HARD_MODES = ("hard_zero", "hard_small_random")
SMALL_RANDOM_HIGH = 1e-3


def neuron_activation(s, kind: str):
    """max_relu -> max(s, 0), min_relu -> min(s, 0), linear -> s."""
    if kind == "max_relu":
        return np.maximum(s, 0.0)
    if kind == "min_relu":
        return np.minimum(s, 0.0)
    if kind == "linear":
        return s
    raise ValueError(f"unknown activation kind {kind!r}")


def _activate(s: np.ndarray, kinds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply per-neuron activations; also return the (sub)gradient mask, 0 at s == 0."""
    is_max = kinds == MAX_RELU
    is_min = kinds == MIN_RELU
    is_lin = kinds == LINEAR
    mask = np.where(is_max, s > 0, np.where(is_min, s < 0, is_lin)).astype(s.dtype)
    if is_lin.all():
        return s, mask
    return s * mask, mask


class DenseLayer:
    """Affine map, optional pre-activation batch normalization, per-neuron activation."""

    bn_eps = 1e-5
    bn_momentum = 0.1

    def __init__(self, n_in: int, n_out: int, kinds: np.ndarray, batch_norm: bool = False):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.W = np.zeros((self.n_in, self.n_out))
        self.b = np.zeros(self.n_out)
        self.kinds = np.asarray(kinds, dtype=np.int8).reshape(self.n_out)
        self.batch_norm = bool(batch_norm)
        if self.batch_norm:
            self.gamma = np.ones(self.n_out)
            self.beta = np.zeros(self.n_out)
            self.running_mean = np.zeros(self.n_out)
            self.running_var = np.ones(self.n_out)

    def params(self) -> list[np.ndarray]:
        if self.batch_norm:
            return [self.W, self.b, self.gamma, self.beta]
        return [self.W, self.b]

    def param_names(self) -> list[str]:
        return ["W", "b", "gamma", "beta"] if self.batch_norm else ["W", "b"]

    def forward(self, x: np.ndarray, training: bool, update_running: bool = True):
        z = x @ self.W + self.b
        cache = {"x": x}
        if self.batch_norm:
            if training:
                if x.shape[0] < 2:
                    raise ValueError("batch normalization needs a batch of at least 2 in training mode")
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_running:
                    self._update_running(mu, var, x.shape[0])
            else:
                mu, var = self.running_mean, self.running_var
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            zhat = (z - mu) * inv_std
            s = self.gamma * zhat + self.beta
            cache.update(zhat=zhat, inv_std=inv_std, training=training)
        else:
            s = z
        y, mask = _activate(s, self.kinds)
        cache["mask"] = mask
        return y, cache

    def _update_running(self, mu, var, m):
        self.running_mean *= 1 - self.bn_momentum
        self.running_mean += self.bn_momentum * mu
        self.running_var *= 1 - self.bn_momentum
        self.running_var += self.bn_momentum * var * m / (m - 1)

    def backward(self, cache, dy: np.ndarray):
        ds = dy * cache["mask"]
        grads = {}
        if self.batch_norm:
            zhat, inv_std = cache["zhat"], cache["inv_std"]
            grads["gamma"] = (ds * zhat).sum(axis=0)
            grads["beta"] = ds.sum(axis=0)
            dzhat = ds * self.gamma
            if cache["training"]:
                m = dzhat.shape[0]
                dz = inv_std / m * (m * dzhat - dzhat.sum(axis=0)
                                    - zhat * (dzhat * zhat).sum(axis=0))
            else:
                dz = dzhat * inv_std
        else:
            dz = ds
        x = cache["x"]
        grads["W"] = x.T @ dz
        grads["b"] = dz.sum(axis=0)
        dx = dz @ self.W.T
        return dx, [grads[name] for name in self.param_names()]


def _hidden_kinds(width: int, min_fraction: float) -> np.ndarray:
    n_min = int(round(width * min_fraction))
    kinds = np.full(width, MAX_RELU, dtype=np.int8)
    if n_min:
        kinds[width - n_min:] = MIN_RELU
    return kinds


class MonotoneNet:
    """Feed-forward network with max/min-ReLU hidden neurons and a weight-constraint mode.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``[n_in, h_1, ..., h_d, n_out]``.
    min_fraction : float
        Share of min-ReLU neurons in every hidden layer (the rest are max-ReLU).
    constraint_mode : {"hard_zero", "hard_small_random", "bn_soft", "none"}
        Hard modes project weights (and BN scales) onto the nonnegative orthant
        after every update; ``bn_soft`` relies on batch normalization only.
    batch_norm : bool, optional
        Pre-activation BN on hidden layers. Defaults to on for every mode but
        ``"none"``.
    linear_output : bool
        If False the last layer is treated as hidden (used by Lyapunov trunks).
    rng : seed or Generator
    """

    def __init__(self, layer_sizes: Sequence[int], min_fraction: float = 0.5,
                 constraint_mode: str = "hard_zero", batch_norm: bool | None = None,
                 linear_output: bool = True, rng=None):
        if constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs at least input and output sizes, all >= 1")
        if not 0.0 <= min_fraction <= 1.0:
            raise ValueError("min_fraction must lie in [0, 1]")
        if batch_norm is None:
            batch_norm = constraint_mode != "none"
        self.layer_sizes = sizes
        self.min_fraction = float(min_fraction)
        self.constraint_mode = constraint_mode
        self.linear_output = bool(linear_output)
        self.layers: list[DenseLayer] = []
        n_layers = len(sizes) - 1
        for li in range(n_layers):
            last = li == n_layers - 1
            if last and self.linear_output:
                kinds = np.full(sizes[li + 1], LINEAR, dtype=np.int8)
                bn = False
            else:
                kinds = _hidden_kinds(sizes[li + 1], self.min_fraction)
                bn = bool(batch_norm)
            self.layers.append(DenseLayer(sizes[li], sizes[li + 1], kinds, batch_norm=bn))
        self.in_shift = np.zeros(sizes[0])
        self.in_scale = np.ones(sizes[0])
        self.out_shift = np.zeros(sizes[-1])
        self.out_scale = np.ones(sizes[-1])
        self._cache = None
        self.initialize(rng)

    # -- construction ------------------------------------------------------ #

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def batch_norm(self) -> bool:
        return any(layer.batch_norm for layer in self.layers)

    def initialize(self, rng=None) -> None:
        """Constrained nets start from uniform (0, 0.01] weights, the rest Kaiming-uniform."""
        rng = np.random.default_rng(rng)
        for layer in self.layers:
            if self.constraint_mode == "none":
                bound = np.sqrt(6.0 / layer.n_in)
                layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
            else:
                layer.W[...] = 0.01 * (1.0 - rng.random(layer.W.shape))
            layer.b[...] = 0.0

    def set_scaling(self, X=None, Y=None) -> None:
        """Fix per-feature standardization of inputs and outputs from data.

        The scales are positive, so the wrapped map stays monotone whenever the
        inner network is. Features with zero spread keep unit scale.
        """
        def stats(A):
            A = np.asarray(A, dtype=float)
            mu, sd = A.mean(axis=0), A.std(axis=0)
            return mu, np.where(sd > 0, sd, 1.0)

        if X is not None:
            self.in_shift, self.in_scale = stats(X)
        if Y is not None:
            self.out_shift, self.out_scale = stats(Y)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_names(self) -> list[str]:
        return [f"{li}.{name}" for li, layer in enumerate(self.layers)
                for name in layer.param_names()]

    def constrained_arrays(self) -> list[np.ndarray]:
        """Inter-neuron weights and BN scales: everything a hard mode keeps nonnegative."""
        out = []
        for layer in self.layers:
            out.append(layer.W)
            if layer.batch_norm:
                out.append(layer.gamma)
        return out

    def copy(self) -> "MonotoneNet":
        clone = copy.deepcopy(self)
        clone._cache = None
        return clone

    # -- evaluation -------------------------------------------------------- #

    def forward(self, X, training: bool = False, update_running: bool = True) -> np.ndarray:
        """Evaluate on a batch ``(B, n_in)``; caches intermediates for :meth:`backward`.

        In training mode BN layers normalize with batch statistics and, unless
        ``update_running`` is False, fold them into the running averages.
        """
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValueError(f"expected input of width {self.n_in}, got shape {X.shape}")
        caches = []
        h = (X - self.in_shift) / self.in_scale
        for layer in self.layers:
            h, cache = layer.forward(h, training, update_running)
            caches.append(cache)
        self._cache = caches
        h = h * self.out_scale + self.out_shift
        return h[0] if squeeze else h

    __call__ = forward

    def predict(self, X) -> np.ndarray:
        return self.forward(X, training=False)

    def backward(self, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``dL/d output`` from the last forward pass.

        Returns the parameter gradients (ordered as :meth:`params`) and the
        gradient with respect to the network input.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        g = np.asarray(output_grad, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        g = g * self.out_scale
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers), reversed(self._cache)):
            g, layer_grads = layer.backward(cache, g)
            grads.append(layer_grads)
        flat = [p for layer_grads in reversed(grads) for p in layer_grads]
        return flat, g / self.in_scale

    # -- constraints ------------------------------------------------------- #

    def project_nonnegative(self, rng=None) -> bool:
        """Reset negative weights after an update; returns False (and warns) when not applicable."""
        if self.constraint_mode not in HARD_MODES:
            warnings.warn(f"project_nonnegative is a no-op under constraint_mode={self.constraint_mode!r}",
                          RuntimeWarning, stacklevel=2)
            return False
        for arr in self.constrained_arrays():
            neg = arr < 0
            if not neg.any():
                continue
            if self.constraint_mode == "hard_zero":
                arr[neg] = 0.0
            else:
                rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
                arr[neg] = SMALL_RANDOM_HIGH * (1.0 - rng.random(int(neg.sum())))
        return True

    def is_nonnegative(self) -> bool:
        return all(np.all(arr >= 0) for arr in self.constrained_arrays())

    def activation_kinds(self) -> list[list[str]]:
        return [[ACTIVATION_NAMES[int(k)] for k in layer.kinds] for layer in self.layers]

    def __repr__(self):
        return (f"MonotoneNet(layer_sizes={self.layer_sizes}, constraint_mode={self.constraint_mode!r}, "
                f"batch_norm={self.batch_norm})")


def forward(net, batch, training: bool = False) -> np.ndarray:
    return net.forward(batch, training=training)


def backward(net, output_grad):
    return net.backward(output_grad)


def project_nonnegative(net: MonotoneNet, rng=None) -> bool:
    return net.project_nonnegative(rng)


class LyapunovNet:
    """Scalar network ``V(x) = max_r (W o_h(x) + z)_r`` over ``n_heads`` affine heads.

    The trunk is a :class:`MonotoneNet` whose last layer is a hidden layer of
    width ``h``; the head ``W`` has shape ``(n_heads, h)``. Gradients reach the
    head only through the maximizing row, ties going to the lowest index.
    """

    def __init__(self, n_in: int, hidden: Sequence[int], n_heads: int | None = None,
                 min_fraction: float = 0.5, constraint_mode: str = "none",
                 batch_norm: bool = False, rng=None):
        rng = np.random.default_rng(rng)
        hidden = [int(h) for h in hidden]
        if not hidden:
            raise ValueError("LyapunovNet needs at least one hidden layer")
        self.n_heads = int(n_heads or n_in)
        self.trunk = MonotoneNet([n_in] + hidden, min_fraction=min_fraction,
                                 constraint_mode=constraint_mode, batch_norm=batch_norm,
                                 linear_output=False, rng=rng)
        h = hidden[-1]
        bound = np.sqrt(6.0 / h)
        self.W = rng.uniform(-bound, bound, size=(self.n_heads, h))
        self.z = np.zeros(self.n_heads)
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.trunk.n_in

    @property
    def constraint_mode(self) -> str:
        return self.trunk.constraint_mode

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + [self.W, self.z]

    def param_names(self) -> list[str]:
        return [f"trunk.{n}" for n in self.trunk.param_names()] + ["head.W", "head.z"]

    def copy(self) -> "LyapunovNet":
        clone = copy.deepcopy(self)
        clone._cache = None
        clone.trunk._cache = None
        return clone

    def forward(self, X, training: bool = False, update_running: bool = True) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        oh = self.trunk.forward(X[None, :] if squeeze else X, training=training,
                                update_running=update_running)
        cand = oh @ self.W.T + self.z
        idx = np.argmax(cand, axis=1)  # first maximum wins ties
        out = cand[np.arange(cand.shape[0]), idx]
        self._cache = (oh, idx)
        return out[0] if squeeze else out

    __call__ = forward

    def backward(self, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        oh, idx = self._cache
        g = np.atleast_1d(np.asarray(output_grad, dtype=float))
        dcand = np.zeros((oh.shape[0], self.n_heads))
        dcand[np.arange(oh.shape[0]), idx] = g
        gW = dcand.T @ oh
        gz = dcand.sum(axis=0)
        doh = dcand @ self.W
        trunk_grads, dx = self.trunk.backward(doh)
        return trunk_grads + [gW, gz], dx

    def project_nonnegative(self, rng=None) -> bool:
        return self.trunk.project_nonnegative(rng)


def lyapunov_value(vnet: LyapunovNet, x, training: bool = False):
    return vnet.forward(x, training=training)
