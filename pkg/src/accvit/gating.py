"""Input-conditioned softmax gating that fuses k parallel branches elementwise."""

from __future__ import annotations

from typing import Sequence

from . import functional as F
from .errors import BranchCountMismatch, ShapeMismatch
from .nn import Conv2d, Init, Module
from .tensor import Tensor, stack

ACTIVATIONS = {"gelu": F.gelu, "relu": F.relu, "sigmoid": F.sigmoid, "tanh": F.tanh}


class GateUnit(Module):
    """g = softmax_k(act(W·x + b)) with a pointwise map c_in → k·c_out.

    Gate channel ``j`` weights branch channels ``j·r … j·r + r − 1`` when the
    branches are ``r`` times wider than the gate, so a narrow gate can steer a
    wide expanded featuremap.
    """

    def __init__(
        self,
        in_channels: int,
        branches: int,
        out_channels: int | None = None,
        activation: str = "gelu",
        init: Init | None = None,
    ):
        init = init or Init()
        self.in_channels = in_channels
        self.out_channels = out_channels or in_channels
        self.branches = branches
        self.activation = activation
        self.proj = Conv2d(in_channels, branches * self.out_channels, 1, init=init)

    def weights(self, x: Tensor) -> Tensor:
        """Gate tensor ``[k, b, c_out, h, w]``; sums to 1 over the first axis."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"gate expects {self.in_channels} input channels, got {x.shape}")
        b, _, h, w = x.shape
        logits = ACTIVATIONS[self.activation](self.proj(x))
        g = F.softmax(logits.reshape(b, self.branches, self.out_channels, h, w), axis=1)
        return g.permute(1, 0, 2, 3, 4)

    def fuse(self, x: Tensor, branches: Sequence[Tensor]) -> Tensor:
        """Σᵢ gᵢ ⊙ yᵢ with gates computed from ``x``, summed in ascending branch order."""
        if len(branches) != self.branches:
            raise BranchCountMismatch(f"gate built for {self.branches} branches, got {len(branches)}")
        shape = branches[0].shape
        if any(y.shape != shape for y in branches) or len(shape) != 4:
            raise ShapeMismatch(f"branch shapes differ: {[y.shape for y in branches]}")
        b, c, h, w = shape
        if (x.shape[0], x.shape[2], x.shape[3]) != (b, h, w) or c % self.out_channels:
            raise ShapeMismatch(f"gate input {x.shape} incompatible with branches {shape}")
        r = c // self.out_channels
        k = self.branches
        g = self.weights(x).reshape(k, b, self.out_channels, 1, h, w)
        ys = stack(branches, axis=0).reshape(k, b, self.out_channels, r, h, w)
        return F.convex_combine(g, ys).reshape(b, c, h, w)

    def forward(self, x: Tensor, branches: Sequence[Tensor]) -> Tensor:
        return self.fuse(x, branches)


def gate_weights(unit: GateUnit, x: Tensor) -> Tensor:
    return unit.weights(x)


def gated_fuse(unit: GateUnit, x: Tensor, branches: Sequence[Tensor]) -> Tensor:
    return unit.fuse(x, branches)
