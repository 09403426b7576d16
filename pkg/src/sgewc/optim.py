from __future__ import annotations

import numpy as np

from .nets import ParameterStore


class Adam:
    """Adam with bias correction over one ParameterStore.

    ``reset`` drops the moment estimates and step count; the sequential
    trainer calls it at every task boundary.
    """

    def __init__(self, params: ParameterStore, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.reset()

    def reset(self) -> "Adam":
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        return self

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; call backward first")
            if p.grad.shape != p.data.shape or self.m[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: param {p.data.shape}, grad {p.grad.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
