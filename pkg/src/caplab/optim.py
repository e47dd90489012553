"""AdamW, learning-rate schedules and gradient clipping."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def step_lr(epoch: int, base_lr: float, every: int = 20, factor: float = 0.1) -> float:
    return base_lr * factor ** (epoch // every)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global l2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                          for g in grads))
    if max_norm > 0 and total > max_norm:
        c = max_norm / (total + 1e-6)
        for g in grads:
            g *= g.dtype.type(c)
    return total


class AdamW:
    """Decoupled weight decay Adam.

    ``params`` is a list of tensors; ``no_decay`` is a set of their indices
    exempt from weight decay.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05,
                 no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            dt = p.data.dtype.type
            g = np.asarray(g, dtype=p.data.dtype)
            if self.weight_decay and i not in self.no_decay:
                p.data = p.data * dt(1.0 - lr * self.weight_decay)
            self.m[i] = dt(self.beta1) * self.m[i] + dt(1.0 - self.beta1) * g
            self.v[i] = dt(self.beta2) * self.v[i] + dt(1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[i] / dt(bc2)) + dt(self.eps)
            p.data = p.data - dt(lr / bc1) * self.m[i] / denom

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i].copy()
            out[f"v.{i}"] = self.v[i].copy()
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for i, p in enumerate(self.params):
            self.m[i] = np.asarray(state[f"m.{i}"], dtype=p.data.dtype).copy()
            self.v[i] = np.asarray(state[f"v.{i}"], dtype=p.data.dtype).copy()
