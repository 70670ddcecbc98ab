"""Adam with bias correction; moment buffers start at zero."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> tuple[list[np.ndarray], list[np.ndarray], int]:
        return self.m, self.v, self.t

    def load_state(self, m: list[np.ndarray], v: list[np.ndarray], t: int):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.m = [np.array(a, dtype=np.float64) for a in m]
        self.v = [np.array(a, dtype=np.float64) for a in v]
        self.t = int(t)
