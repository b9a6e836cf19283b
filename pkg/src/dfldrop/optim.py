"""SGD with momentum and Adam over flat float64 vectors.

Both keep their slot buffers on the instance and return a fresh array from
``step``; the input array is never modified.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError


def _check(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match target shape {x.shape}")
    return x, g


@dataclass
class SGD:
    """``v <- momentum * v + g``; ``x <- x - lr * v``."""

    lr: float = 0.01
    momentum: float = 0.0
    step_count: int = 0
    velocity: np.ndarray | None = field(default=None, repr=False)

    def step(self, x, g) -> np.ndarray:
        x, g = _check(x, g)
        if self.momentum:
            if self.velocity is None or self.velocity.shape != g.shape:
                self.velocity = np.zeros_like(g)
            self.velocity = self.momentum * self.velocity + g
            update = self.velocity
        else:
            update = g
        self.step_count += 1
        return x - self.lr * update


@dataclass
class Adam:
    """Bias-corrected Adam; ``weight_decay`` is decoupled (AdamW style)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    def step(self, x, g) -> np.ndarray:
        x, g = _check(x, g)
        if self.m is None or self.m.shape != g.shape:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        out = x * (1.0 - self.lr * self.weight_decay) if self.weight_decay else x
        return out - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_momentum_step(state: SGD, params, grad):
    """Functional spelling of ``state.step``; accepts ParamVec or arrays."""
    if hasattr(params, "with_data"):
        return params.with_data(state.step(params.data, getattr(grad, "data", grad)))
    return state.step(params, grad)


def adam_step(state: Adam, target, grad) -> np.ndarray:
    return state.step(target, grad)
