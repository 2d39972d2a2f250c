"""Parameter containers and the standard layers built on the functional ops."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from . import counting
from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Base class for layers.

    Parameters, sub-modules and buffers are discovered from instance
    attributes in assignment order, which fixes the naming of every
    parameter (``stage1.blocks.0.dwconv.weight``) and therefore the
    checkpoint layout.
    """

    training = True

    def __init__(self):
        self._buffer_names: list[str] = []

    def __call__(self, *args, **kwargs):
        pushed = counting.push_module(self)
        try:
            return self.forward(*args, **kwargs)
        finally:
            if pushed:
                counting.pop_module()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Persistent non-trainable state, saved in checkpoints."""
        setattr(self, name, value)
        self._buffer_names.append(name)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in getattr(mod, "_buffer_names", ()):
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, arr in own.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ConfigError(f"{k}: shape {src.shape} != expected {arr.shape}")
        params = dict(self.named_parameters())
        for k, arr in own.items():
            src = np.asarray(state[k])
            if k in params:
                params[k].data = src.astype(arr.dtype, copy=True)
            else:
                arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and floating buffers to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in getattr(m, "_buffer_names", ()):
                buf = getattr(m, name)
                if buf.dtype.kind == "f":
                    setattr(m, name, buf.astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(self._n), module)
        self._n += 1

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> Module:
        if i < 0:
            i += self._n
        return getattr(self, str(i))

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x


# ---------------------------------------------------------------- initializers

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(DEFAULT_DTYPE)


# ---------------------------------------------------------------------- layers

class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator,
                 stride=1, padding=0, groups: int = 1, bias: bool = True):
        super().__init__()
        kh, kw = F._pair(kernel)
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        self.in_ch, self.out_ch, self.groups = in_ch, out_ch, groups
        self.stride, self.padding = F._pair(stride), F._pair(padding)
        fan_in = (in_ch // groups) * kh * kw
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "kaiming"):
        super().__init__()
        if init == "kaiming":
            w = kaiming_uniform(rng, (d_out, d_in), d_in)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (d_out, d_in))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x):
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, axis: int = -1, eps: float = 1e-5):
        super().__init__()
        self.axis, self.eps = axis, eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.axis, self.eps)


class Dropout(Module):
    """Inverted dropout whose rate can be changed between epochs."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = float(p)
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)
