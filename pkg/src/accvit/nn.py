"""Module containers and basic layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always participates in gradient recording."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Init:
    """Seeded weight initializer shared by every layer of one model build.

    With ``materialize=False`` all parameters are zero-stride broadcast views,
    so huge variants can be built for shape and size analysis without memory.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, materialize: bool = True, std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize
        self.std = std

    def _meta(self, shape):
        return np.broadcast_to(np.zeros((), dtype=self.dtype), shape)

    def trunc_normal(self, shape) -> Parameter:
        """Normal(0, std²) truncated to ±2 std by resampling."""
        if not self.materialize:
            return Parameter(self._meta(shape))
        out = self.rng.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return Parameter((out * self.std).astype(self.dtype))

    def zeros(self, shape) -> Parameter:
        return Parameter(self._meta(shape) if not self.materialize else np.zeros(shape, self.dtype))

    def ones(self, shape) -> Parameter:
        if not self.materialize:
            return Parameter(self._meta(shape))
        return Parameter(np.ones(shape, self.dtype))


class Module:
    """Base class: parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{name}.")

    def direct_parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast every parameter in place (used to run gradient checks at f64)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, init: Init | None = None):
        init = init or Init()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init.trunc_normal((out_features, in_features))
        self.bias = init.zeros((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        init: Init | None = None,
    ):
        init = init or Init()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.weight = init.trunc_normal((out_channels, in_channels // groups, kernel_size, kernel_size))
        self.bias = init.zeros((out_channels,)) if bias else None

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p, d = self.kernel_size, self.stride, self.padding, self.dilation
        return (h + 2 * p - d * (k - 1) - 1) // s + 1, (w + 2 * p - d * (k - 1) - 1) // s + 1

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class LayerNorm(Module):
    """Normalizes the last axis (channels-last tensors)."""

    axis = -1

    def __init__(self, dim: int, eps: float = 1e-5, init: Init | None = None):
        init = init or Init()
        self.dim = dim
        self.eps = eps
        self.weight = init.ones((dim,))
        self.bias = init.zeros((dim,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


class ChannelNorm(LayerNorm):
    """Per-sample normalization across channels at every pixel of ``[b,c,h,w]``.

    Batch-independent replacement for batch normalization inside conv blocks.
    """

    axis = 1
