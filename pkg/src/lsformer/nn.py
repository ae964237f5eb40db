"""Parameter containers and the layers the model is assembled from.

Layers accept either folded ``[N, C, H, W]`` or time-major
``[T, B, C, H, W]`` tensors; stateless layers fold time into the batch axis.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tt
from .neuron import LIFParams, lif_sequence
from .tensor import Tensor, _report


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters are taped leaf tensors, buffers are arrays."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}
        self._scope_name: str | None = None

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        if self._scope_name is None:
            return self.forward(*args, **kwargs)
        with tt.scope(self._scope_name):
            return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in self.__dict__.items():
            if key.startswith("_") or key == "training":
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, arr in self._buffers.items():
            yield prefix + key, arr
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")

    def assign_scopes(self) -> None:
        """Name every submodule after its attribute path (used for profiling).

        Lists are iterated rather than called, so their items carry the list name.
        """
        lists = {name for name, mod in self.named_modules() if isinstance(mod, ModuleList)}
        for name, mod in self.named_modules():
            parent, _, leaf = name.rpartition(".")
            mod._scope_name = (f"{parent.rpartition('.')[2]}.{leaf}" if parent in lists else leaf) or None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for key in mod._buffers:
                mod._buffers[key] = mod._buffers[key].astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def _fold(x: Tensor) -> tuple[Tensor, tuple | None]:
    if x.ndim == 5:
        t, b = x.shape[:2]
        return x.reshape(t * b, *x.shape[2:]), (t, b)
    return x, None


def _unfold(y: Tensor, tb: tuple | None) -> Tensor:
    if tb is None:
        return y
    return y.reshape(*tb, *y.shape[1:])


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = False,
    ):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise tt.ConfigError(f"channels ({c_in}, {c_out}) not divisible by groups={groups}")
        fan_in = c_in // groups * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = parameter(_uniform(rng, bound, (c_out, c_in // groups, kernel, kernel)))
        self.bias = parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        x4, tb = _fold(x)
        y = tt.conv2d(x4, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)
        return _unfold(y, tb)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels, dtype=tt.get_default_dtype())
        self._buffers["running_var"] = np.ones(channels, dtype=tt.get_default_dtype())
        self.eps, self.momentum = eps, momentum

    def forward(self, x: Tensor) -> Tensor:
        x4, tb = _fold(x)
        y = tt.batchnorm(
            x4,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )
        return _unfold(y, tb)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(_uniform(rng, bound, (d_in, d_out)))
        self.bias = parameter(_uniform(rng, bound, (d_out,)))

    def forward(self, x: Tensor) -> Tensor:
        return tt.matmul(x, self.weight) + self.bias


class LIFNode(Module):
    """Spiking neuron layer over time-major input [T, ...].

    Reports its output spikes to an active recorder so firing rates can be
    read per layer.
    """

    def __init__(self, params: LIFParams | None = None):
        super().__init__()
        self.params = params or LIFParams()

    def forward(self, x: Tensor) -> Tensor:
        s = lif_sequence(x, self.params)
        _report("spikes", 0.0, s.data)
        return s


class Scale(Module):
    """A learnable scalar multiplier (the SDA/CRA fusion weights)."""

    def __init__(self, init: float):
        super().__init__()
        self.value = parameter(np.asarray(init))

    def forward(self, x: Tensor) -> Tensor:
        return tt.mul(x, self.value)
