"""Parameter containers and the small set of layers the model needs."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples truncated to ``[-bound*std, bound*std]`` by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Tree of named parameters and non-trainable buffers.

    Parameters are Tensors with ``requires_grad``; buffers are plain numpy
    arrays registered in ``self._buffers`` (batch-norm running statistics).
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and name in self._param_names():
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def _param_names(self) -> set:
        return getattr(self, "_params", set())

    def register(self, name: str, data) -> Tensor:
        t = parameter(data)
        if not hasattr(self, "_params"):
            self._params = set()
        self._params.add(name)
        setattr(self, name, t)
        return t

    def register_buffer(self, name: str, data) -> np.ndarray:
        if not hasattr(self, "_buffers"):
            self._buffers = {}
        arr = np.array(data, dtype=get_dtype())
        self._buffers[name] = arr
        return arr

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", arr
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.register("weight", trunc_normal(rng, (d_in, d_out)))
        self.bias = self.register("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Channels-last convolution with weight layout (kh, kw, Cin, Cout)."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        self.register("weight", trunc_normal(rng, (kernel, kernel, c_in, c_out)))
        self.bias = self.register("bias", np.zeros(c_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.register("gamma", np.ones(dim))
        self.register("beta", np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Channels-last batch norm; running stats updated with momentum 0.9."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.register("gamma", np.ones(dim))
        self.register("beta", np.zeros(dim))
        self.running_mean = self.register_buffer("running_mean", np.zeros(dim))
        self.running_var = self.register_buffer("running_var", np.ones(dim))

    def __call__(self, x) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class MLP(Module):
    """Linear -> GELU -> Linear feed-forward used by the transformer blocks."""

    def __init__(self, rng, dim: int, hidden: int, drop: float = 0.0):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.drop = drop
        self._rng = np.random.default_rng(rng.integers(2**32)) if drop > 0 else None

    def __call__(self, x) -> Tensor:
        h = ops.gelu(self.fc1(x))
        h = ops.dropout(h, self.drop, self._rng, self.training)
        return self.fc2(h)
