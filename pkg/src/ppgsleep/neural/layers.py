"""Layer objects: parameter containers around the fused ops.

A layer exposes ``forward(x, ctx)`` plus ``param_items()`` / ``buffer_items()``
for checkpointing. ``RunContext`` carries the train/eval flag and the RNG
that feeds dropout masks and the statistics-perturbation draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class RunContext:
    training: bool
    rng: np.random.Generator | None = None


class Layer:
    def forward(self, x: Tensor, ctx: RunContext) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        return self.forward(x, ctx)

    def param_items(self):
        return []

    def buffer_items(self):
        return []


class Conv1D(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, dilation: int = 1, *, rng):
        std = np.sqrt(2.0 / (in_ch * kernel))
        self.w = Tensor.param(rng.normal(0.0, std, size=(out_ch, in_ch, kernel)))
        self.b = Tensor.param(np.zeros(out_ch))
        self.dilation = dilation

    def forward(self, x, ctx):
        return ops.conv1d(x, self.w, self.b, self.dilation)

    def param_items(self):
        return [("w", self.w), ("b", self.b)]


class BatchNorm(Layer):
    """Running statistics are stored as (mean, std-including-eps) so that a
    fresh layer is an exact identity in eval mode."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Tensor.param(np.ones(channels))
        self.beta = Tensor.param(np.zeros(channels))
        self.run_mean = np.zeros(channels)
        self.run_std = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x, ctx):
        if ctx.training:
            y, batch_mean, batch_std = ops.batchnorm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.run_mean = m * self.run_mean + (1.0 - m) * batch_mean
            self.run_std = m * self.run_std + (1.0 - m) * batch_std
            return y
        return ops.batchnorm_eval(x, self.gamma, self.beta, self.run_mean, self.run_std)

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffer_items(self):
        return [("run_mean", self.run_mean), ("run_std", self.run_std)]

    def load_buffer(self, name, value):
        setattr(self, name, np.array(value, dtype=np.float64))


class ReLU(Layer):
    def forward(self, x, ctx):
        from . import tensor as T

        return T.relu(x)


class MaxPool(Layer):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x, ctx):
        return ops.maxpool1d(x, self.stride)


class Dropout(Layer):
    def __init__(self, p: float):
        self.p = p

    def forward(self, x, ctx):
        if not ctx.training or self.p <= 0.0:
            return x
        return ops.dropout(x, self.p, ctx.rng)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, *, rng):
        std = np.sqrt(2.0 / in_features)
        self.w = Tensor.param(rng.normal(0.0, std, size=(in_features, out_features)))
        self.b = Tensor.param(np.zeros(out_features))

    def forward(self, x, ctx):
        return x @ self.w + self.b

    def param_items(self):
        return [("w", self.w), ("b", self.b)]


class Dsu(Layer):
    """Statistics-perturbation layer; identity in eval mode or at p = 0.
    The apply/skip draw is made once per forward call (per batch)."""

    def __init__(self, p: float = 0.5):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be a probability")
        self.p = p

    def forward(self, x, ctx):
        return ops.dsu_forward(x, self.p, ctx.rng, ctx.training)


class Softmax(Layer):
    def __init__(self, axis: int = 1):
        self.axis = axis

    def forward(self, x, ctx):
        return ops.softmax(x, self.axis)
