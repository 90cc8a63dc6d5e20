"""Module containers and the basic parameterised layers."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import NonFiniteError
from .tensor import Tensor

_probe = {"active": False}


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


@contextlib.contextmanager
def nonfinite_probe():
    """Raise ``NonFiniteError`` naming the first module whose output is non-finite."""
    prev = _probe["active"]
    _probe["active"] = True
    try:
        yield
    finally:
        _probe["active"] = prev


class Module:
    """Minimal module tree. Parameters and children are discovered from attributes."""

    path = ""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if _probe["active"]:
            t = out[0] if isinstance(out, tuple) else out
            if isinstance(t, Tensor) and not np.all(np.isfinite(t.data)):
                name = self.path or type(self).__name__
                raise NonFiniteError(f"non-finite output first produced by layer '{name}'", layer=name)
        return out

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(prefix=f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix=f"{prefix}{name}.")

    def assign_paths(self) -> None:
        for name, mod in self.named_modules():
            mod.path = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, dtype=np.float32):
        self.in_channels, self.out_channels = cin, cout
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((cout, cin // groups, kernel, kernel), dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float32):
        self.channels, self.eps = channels, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm_channels(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, dtype=np.float32):
        self.in_features, self.out_features = cin, cout
        self.weight = Parameter(np.zeros((cout, cin), dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
