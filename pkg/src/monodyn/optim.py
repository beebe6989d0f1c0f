"""Adam with step-wise exponential learning-rate decay and weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Adam moments plus the learning-rate schedule ``base_lr * decay_rate ** (step // decay_interval)``.

    ``decay_style="decoupled"`` shrinks parameters by ``1 - lr_eff * weight_decay``
    before the Adam update; ``"l2"`` adds ``weight_decay * param`` to the gradient.
    """

    base_lr: float = 1e-4
    decay_rate: float = 0.98
    decay_interval: int = 250
    weight_decay: float = 0.01
    decay_style: str = "decoupled"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.decay_style not in ("decoupled", "l2"):
            raise ValueError("decay_style must be 'decoupled' or 'l2'")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")

    def lr_at(self, step: int) -> float:
        return self.base_lr * self.decay_rate ** (step // self.decay_interval)

    @property
    def lr(self) -> float:
        return self.lr_at(self.step)


def adam_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray],
              names: list[str] | None = None) -> None:
    """Update ``params`` in place and advance the step counter."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient {i} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else str(i)
            raise FloatingPointError(f"non-finite gradient for parameter {label} at step {state.step}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            if state.decay_style == "decoupled":
                p *= 1.0 - lr * state.weight_decay
            else:
                g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
