"""Convolutional stem, squeeze-and-excitation, and the atrous inverted-residual block."""

from __future__ import annotations

from . import functional as F
from .errors import OddInput, ShapeMismatch
from .gating import GateUnit
from .nn import ChannelNorm, Conv2d, Init, Linear, Module, ModuleList
from .tensor import Tensor

BRANCH_DILATIONS = (1, 2, 3)


class SqueezeExcite(Module):
    """x ⊙ sigmoid(W₂·gelu(W₁·GAP(x))), one scale per channel."""

    def __init__(self, channels: int, squeeze: int, init: Init | None = None):
        init = init or Init()
        self.channels = channels
        self.reduce = Linear(channels, squeeze, init=init)
        self.expand = Linear(squeeze, channels, init=init)

    def scale(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"SE expects {self.channels} channels, got {x.shape}")
        s = F.global_avg_pool(x)
        return F.sigmoid(self.expand(F.gelu(self.reduce(s))))

    def forward(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        return x * self.scale(x).reshape(b, c, 1, 1)


class Stem(Module):
    """conv3×3 stride 2 → GELU → conv3×3, halving resolution."""

    def __init__(self, in_channels: int, width: int, init: Init | None = None):
        init = init or Init()
        self.width = width
        self.conv1 = Conv2d(in_channels, width, 3, stride=2, padding=1, init=init)
        self.conv2 = Conv2d(width, width, 3, padding=1, init=init)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeMismatch(f"stem expects [b,c,h,w], got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise OddInput(f"stem needs even spatial size, got {x.shape[2]}x{x.shape[3]}")
        return self.conv2(F.gelu(self.conv1(x)))


class DilatedBranch(Module):
    """Depthwise 3×3 at one dilation, padding = dilation, then norm and GELU."""

    def __init__(self, channels: int, dilation: int, stride: int, init: Init):
        self.dilation = dilation
        self.conv = Conv2d(channels, channels, 3, stride=stride, padding=dilation,
                           dilation=dilation, groups=channels, init=init)
        self.norm = ChannelNorm(channels, init=init)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.norm(self.conv(x)))


class AtrousMBConv(Module):
    """Inverted residual with three parallel dilated depthwise branches.

    norm → 1×1 expand → {dw3×3 at dilation 1, 2, 3} → gated fusion → SE → 1×1
    project, plus a shortcut. The gate reads the raw block input (pooled when
    striding) and emits ``out_channels`` weights per branch, each shared by
    ``expansion`` adjacent expanded channels.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        expansion: int = 4,
        se_ratio: float = 0.25,
        gate_activation: str = "gelu",
        init: Init | None = None,
    ):
        init = init or Init()
        if stride not in (1, 2):
            raise ShapeMismatch(f"stride must be 1 or 2, got {stride}")
        mid = expansion * out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.pre_norm = ChannelNorm(in_channels, init=init)
        self.expand = Conv2d(in_channels, mid, 1, init=init)
        self.expand_norm = ChannelNorm(mid, init=init)
        self.branches = ModuleList(DilatedBranch(mid, d, stride, init) for d in BRANCH_DILATIONS)
        self.gate = GateUnit(in_channels, len(BRANCH_DILATIONS), out_channels,
                             activation=gate_activation, init=init)
        self.se = SqueezeExcite(mid, max(1, int(out_channels * se_ratio)), init=init)
        self.project = Conv2d(mid, out_channels, 1, init=init)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, init=init)
        else:
            self.shortcut = None

    def _pool(self, x: Tensor) -> Tensor:
        return F.avg_pool2d(x, 2) if self.stride == 2 else x

    def mixed(self, x: Tensor) -> Tensor:
        """Gated fusion of the dilated branches (the pre-SE featuremap)."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected [b, {self.in_channels}, h, w], got {x.shape}")
        if self.stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
            raise OddInput(f"strided block needs even spatial size, got {x.shape[2]}x{x.shape[3]}")
        e = F.gelu(self.expand_norm(self.expand(self.pre_norm(x))))
        ys = [branch(e) for branch in self.branches]
        return self.gate.fuse(self._pool(x), ys)

    def residual(self, x: Tensor) -> Tensor:
        if self.shortcut is None:
            return x
        return self.shortcut(self._pool(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.project(self.se(self.mixed(x))) + self.residual(x)


def atrous_mbconv_forward(block: AtrousMBConv, x: Tensor) -> Tensor:
    return block(x)


def se_forward(se: SqueezeExcite, x: Tensor) -> Tensor:
    return se(x)


def stem_forward(stem: Stem, image: Tensor) -> Tensor:
    return stem(image)
