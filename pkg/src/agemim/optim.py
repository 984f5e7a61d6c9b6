"""SGD-with-momentum and Adam over dicts of named numpy arrays.

Both apply weight decay as an L2 term added to the gradient.  Optimizer
state is a flat ``dict[str, ndarray]`` so it can be checkpointed alongside
the parameters.
"""
from __future__ import annotations

from typing import MutableMapping

import numpy as np


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            g = g + self.weight_decay * p
            key = f"sgd.buf.{name}"
            buf = self.state.get(key)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.state[key] = buf
            params[name] = (p - lr * buf).astype(p.dtype)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        t = int(self.state.get("adam.t", np.zeros(1))[0]) + 1
        self.state["adam.t"] = np.array([t], dtype=np.float64)
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            g = g + self.weight_decay * p
            m = self.state.get(f"adam.m.{name}", np.zeros_like(p))
            v = self.state.get(f"adam.v.{name}", np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[f"adam.m.{name}"] = m
            self.state[f"adam.v.{name}"] = v
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
