"""Windowed multi-head self-attention and the multi-dilation attention layer."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import IndivisibleDims, InvalidConfig, ShapeMismatch
from .gating import GateUnit
from .nn import Init, LayerNorm, Linear, Module, ModuleList
from .partition import WindowGrid, departition, partition, window_merge, window_split
from .tensor import Tensor, matmul, take


@lru_cache(maxsize=None)
def relative_position_index(window: int, table_window: int | None = None) -> np.ndarray:
    """``[P², P²]`` lookup of query/key offsets into a ``(2Pt−1)²`` bias table.

    Offset (Δi, Δj) = query − key maps to (Δi+Pt−1)·(2Pt−1) + (Δj+Pt−1). A
    window smaller than the table size reuses the central block of the table.
    """
    P = window
    Pt = table_window or window
    if P > Pt:
        raise ShapeMismatch(f"window {P} exceeds bias table window {Pt}")
    ii, jj = np.meshgrid(np.arange(P), np.arange(P), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()])
    delta = coords[:, :, None] - coords[:, None, :]
    idx = (delta[0] + Pt - 1) * (2 * Pt - 1) + (delta[1] + Pt - 1)
    idx.setflags(write=False)
    return idx


def effective_window(h: int, w: int, window: int) -> int:
    """Largest window side ≤ ``window`` that tiles an h×w map exactly."""
    for p in range(min(window, h, w), 0, -1):
        if h % p == 0 and w % p == 0:
            return p
    return 1


class WindowedMHSA(Module):
    """Multi-head self-attention inside each window, with relative position bias."""

    def __init__(self, dim: int, head_dim: int = 32, window_size: int = 7, init: Init | None = None):
        init = init or Init()
        if dim % head_dim:
            raise InvalidConfig(f"channels {dim} not divisible by head_dim {head_dim}")
        self.dim = dim
        self.head_dim = head_dim
        self.num_heads = dim // head_dim
        self.window_size = window_size
        self.scale = head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, init=init)
        self.proj = Linear(dim, dim, init=init)
        self.rel_pos_bias = init.zeros(((2 * window_size - 1) ** 2, self.num_heads))

    def bias(self, window: int) -> Tensor:
        """Per-head bias ``[heads, P², P²]`` for a window of side ``window``."""
        idx = relative_position_index(window, self.window_size)
        return take(self.rel_pos_bias, idx).permute(2, 0, 1)

    def attention(self, x: Tensor, window: int) -> tuple[Tensor, Tensor]:
        """Return (output ``[n, T, c]``, attention weights ``[n, heads, T, T]``)."""
        if x.ndim != 3 or x.shape[1] != window * window or x.shape[2] != self.dim:
            raise ShapeMismatch(f"expected [n, {window * window}, {self.dim}] tokens, got {x.shape}")
        n, T, c = x.shape
        H, hd = self.num_heads, self.head_dim
        qkv = self.qkv(x).reshape(n, T, 3, H, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = matmul(q * self.scale, k.transpose(-2, -1)) + self.bias(window)
        attn = F.softmax(logits, axis=-1)
        out = matmul(attn, v).permute(0, 2, 1, 3).reshape(n, T, c)
        return self.proj(out), attn

    def forward(self, windows):
        """Attend within each window; accepts a :class:`WindowGrid` or ``[n, P², c]`` tokens."""
        if isinstance(windows, WindowGrid):
            out, _ = self.attention(windows.windows, windows.window_size)
            return WindowGrid(out, windows.window_size, windows.grid, windows.source_shape)
        side = int(round(np.sqrt(windows.shape[1])))
        return self.attention(windows, side)[0]


def to_channels_last(x: Tensor) -> Tensor:
    return x.permute(0, 2, 3, 1)


def to_channels_first(x: Tensor) -> Tensor:
    return x.permute(0, 3, 1, 2)


class AttentionBranch(Module):
    """One dilation level: partition → LN → W-MHSA → departition, plus residual."""

    def __init__(self, dim: int, dilation: int, head_dim: int, window_size: int, init: Init):
        self.dilation = dilation
        self.norm = LayerNorm(dim, init=init)
        self.attn = WindowedMHSA(dim, head_dim, window_size, init=init)

    def forward(self, x: Tensor) -> Tensor:
        p = partition(x, self.dilation)
        _, _, hs, ws = p.phases.shape
        P = effective_window(hs, ws, self.attn.window_size)
        grid = window_split(p.phases, P)
        tokens = self.norm(grid.windows)
        attended = self.attn(WindowGrid(tokens, P, grid.grid, grid.source_shape))
        phases = window_merge(attended)
        return departition(type(p)(phases, p.dilation, p.original_shape)) + x


class MLP(Module):
    def __init__(self, dim: int, ratio: int = 4, init: Init | None = None):
        init = init or Init()
        self.fc1 = Linear(dim, ratio * dim, init=init)
        self.fc2 = Linear(ratio * dim, dim, init=init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AtrousAttentionLayer(Module):
    """Parallel attention at several dilations, gated fusion, then a shared MLP.

    Branch 0 is undilated; further branches follow ``dilations`` in ascending
    order. Gates are computed from the raw layer input.
    """

    def __init__(
        self,
        dim: int,
        dilations: Sequence[int] = (),
        head_dim: int = 32,
        window_size: int = 7,
        mlp_ratio: int = 4,
        gate_activation: str = "gelu",
        init: Init | None = None,
    ):
        init = init or Init()
        self.dim = dim
        self.dilations = (1,) + tuple(sorted(dilations))
        self.branches = ModuleList(
            AttentionBranch(dim, d, head_dim, window_size, init) for d in self.dilations
        )
        self.gate = GateUnit(dim, len(self.dilations), activation=gate_activation, init=init)
        self.mlp_norm = LayerNorm(dim, init=init)
        self.mlp = MLP(dim, mlp_ratio, init=init)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeMismatch(f"expected [b, {self.dim}, h, w], got {x.shape}")
        h, w = x.shape[2:]
        for d in self.dilations:
            if h % d or w % d:
                raise IndivisibleDims(f"dilation {d} does not divide spatial size {h}x{w}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        ys = [branch(x) for branch in self.branches]
        fused = self.gate.fuse(x, ys)
        t = to_channels_last(fused)
        return to_channels_first(self.mlp(self.mlp_norm(t)) + t)


def atrous_attention_forward(layer: AtrousAttentionLayer, x: Tensor) -> Tensor:
    return layer(x)


def wmhsa_forward(m: WindowedMHSA, windows: WindowGrid) -> WindowGrid:
    return m(windows)
