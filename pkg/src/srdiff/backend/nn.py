"""Parameters, a small module container, and the layers the networks use."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .rng import Rng
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, step_count={self.step_count})"


class Module:
    """Registers parameters and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _normal_init(rng: Rng, shape, fan_in: int, gain: float) -> np.ndarray:
    std = gain / np.sqrt(fan_in)
    return (rng.normal(shape, dtype=np.float64) * std).astype(get_default_dtype())


class Conv2d(Module):
    """Convolution layer over channels-last (N, H, W, C) activations."""

    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1, padding: int | None = None,
                 gain: float = 1.0, zero: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        w = np.zeros(shape, get_default_dtype()) if zero else _normal_init(rng, shape, cin * k * k, gain)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d_nhwc(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution over channels-last activations."""

    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 2, padding: int = 1, gain: float = 1.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        # each output pixel receives about cin*k*k/stride^2 taps
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = Parameter(_normal_init(rng, (cin, cout, k, k), fan_in, gain))
        self.bias = Parameter(np.zeros(cout, get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose_nhwc(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: Rng, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(_normal_init(rng, (din, dout), din, gain))
        self.bias = Parameter(np.zeros(dout, get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)
