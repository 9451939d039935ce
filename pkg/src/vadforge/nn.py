"""Layer containers over the tensor kernels: parameters, buffers, train/eval."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def kaiming_uniform(shape: tuple[int, ...], fan_in: int,
                    rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class with recursive parameter/buffer discovery and mode switching."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(list):
    """Plain list of sub-modules that participates in parameter discovery."""


class Conv2d(Module):
    """3x3 same-pad convolution, Kaiming-uniform weights, zero bias."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        fan_in = in_channels * 9
        self.weight = Tensor(kaiming_uniform((out_channels, in_channels, 3, 3),
                                             fan_in, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, pad_same=True)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self._buffers["running_mean"],
                             self._buffers["running_var"],
                             training=self.training,
                             momentum=self.momentum, eps=self.eps)


class PReLU(Module):
    def __init__(self, channels: int, channel_axis: int = 0, init: float = 0.25):
        super().__init__()
        self.slopes = Tensor(np.full(channels, init), requires_grad=True)
        self.channel_axis = channel_axis

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slopes, channel_axis=self.channel_axis)


class MaxPool2d(Module):
    def __init__(self, pool: tuple[int, int] = (2, 1)):
        super().__init__()
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x, self.pool)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, zero_init: bool = False,
                 bias: bool = True):
        super().__init__()
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            w = kaiming_uniform((in_features, out_features), in_features, rng)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, eps=self.eps)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("Dropout in training mode needs an rng")
        return T.dropout(x, self.p, rng, training=True)
