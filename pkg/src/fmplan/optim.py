"""Textbook first-order update rules on numpy arrays, plus an Adam wrapper for parameter dicts."""
from __future__ import annotations

import numpy as np


def adam_update(p, g, m, v, k, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step; ``k`` is the post-increment step index (k >= 1)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** k)
    vhat = v / (1.0 - beta2 ** k)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


def sgd_momentum_update(p, g, vel, lr=1e-2, momentum=0.9):
    vel = momentum * vel + g
    return p - lr * vel, vel


def rmsprop_update(p, g, sq, lr=1e-2, alpha=0.99, eps=1e-8):
    sq = alpha * sq + (1.0 - alpha) * g * g
    return p - lr * g / (np.sqrt(sq) + eps), sq


class Adam:
    """Adam over a ``{name: ndarray}`` parameter dict, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.k += 1
        for name, g in grads.items():
            self.params[name], self.m[name], self.v[name] = adam_update(
                self.params[name], g, self.m[name], self.v[name], self.k,
                self.lr, self.beta1, self.beta2, self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], k: int) -> None:
        for name in self.params:
            self.m[name] = np.array(tensors[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(tensors[f"adam.v.{name}"], dtype=np.float64)
        self.k = int(k)
