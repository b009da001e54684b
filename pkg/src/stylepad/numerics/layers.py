"""Minimal module system: parameter registration, train/eval mode, buffers."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor, parameter

ParameterSet = OrderedDict  # name -> Tensor(requires_grad=True), insertion ordered


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; buffers are numpy arrays
    registered through ``register_buffer``. Iteration order follows attribute assignment."""

    training: bool = True

    def __init__(self) -> None:
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}.")

    def named_parameters(self) -> ParameterSet:
        out: ParameterSet = OrderedDict()
        for prefix, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    out[prefix + name] = value
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> OrderedDict:
        out = OrderedDict()
        for prefix, mod in self.named_modules():
            for name, value in mod._buffers.items():
                out[prefix + name] = value
        return out

    def state_dict(self) -> OrderedDict:
        state = OrderedDict((k, v.data) for k, v in self.named_parameters().items())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for k, p in params.items():
            src = np.asarray(state[k], dtype=DTYPE)
            if src.shape != p.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {p.shape}")
            p.data[...] = src
        for k, b in buffers.items():
            b[...] = state[k]

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, prefix: str):
    if isinstance(value, Module):
        yield from value.named_modules(prefix)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{prefix}{i}.")


def kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    """He-uniform init for ReLU-family nets: U(-b, b), b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_init(rng, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(n,))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True, init_scale: float = 1.0):
        super().__init__()
        self.weight = parameter(kaiming_uniform(rng, (n_out, n_in), n_in) * init_scale)
        self.bias = parameter(_bias_init(rng, n_out, n_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = c_in * kernel
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, kernel), fan_in))
        self.bias = parameter(_bias_init(rng, c_out, fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(
        self, c_in: int, c_out: int, kernel: int, rng, stride: int = 1, padding: int = 0, output_padding: int = 0
    ):
        super().__init__()
        fan_in = c_out * kernel
        self.weight = parameter(kaiming_uniform(rng, (c_in, c_out, kernel), fan_in))
        self.bias = parameter(_bias_init(rng, c_out, fan_in))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose1d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, output_padding=self.output_padding
        )


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None):
        super().__init__()
        self.groups = groups or min(8, channels)
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
        )
