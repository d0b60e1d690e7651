"""Adam-style adaptive optimizer over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["Adam"]


class Adam:
    """Plain Adam with optional decoupled weight decay.

    A parameter without a gradient is left bitwise untouched, and a
    gradient that is zero at every step produces an exactly-zero update,
    so frozen and stationary parameters never move.
    """

    def __init__(
        self,
        tensors: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.tensors = dict(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {n: np.zeros_like(t.values) for n, t in self.tensors.items()}
        self._v = {n: np.zeros_like(t.values) for n, t in self.tensors.items()}
        self._t = 0

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for name, t in self.tensors.items():
            g = t.grad
            if g is None:
                continue
            if self.weight_decay:
                t.values *= 1.0 - self.lr * self.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
