"""Adam with bias correction."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Parameter


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update of ``param``, ``m`` and ``v`` at step ``t`` (1-based)."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Updates only trainable parameters that received a gradient."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = [p for p in params if p.trainable]
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.trainable:
                continue
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"m.{p.name}"] = m.copy()
            out[f"v.{p.name}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"m.{p.name}"], dtype=p.data.dtype)
            self.v[i] = np.array(state[f"v.{p.name}"], dtype=p.data.dtype)
        self.t = t
