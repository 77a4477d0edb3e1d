"""Full classifier: stem, four stages of (conv block → attention layer), head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .attention import AtrousAttentionLayer
from .conv_blocks import AtrousMBConv, Stem
from .errors import IndivisibleDims, InvalidConfig, UnknownVariant
from .nn import Init, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor

STAGE_DILATIONS = ((2, 4, 8), (2, 4), (2,), ())


@dataclass(frozen=True)
class ModelConfig:
    name: str
    depths: tuple  # blocks per stage S1..S4
    widths: tuple  # channels per stage S1..S4
    stem_width: int
    head_dim: int = 32
    window_size: int = 7
    mlp_ratio: int = 4
    expansion: int = 4
    se_ratio: float = 0.25
    num_classes: int = 1000
    in_channels: int = 3
    dilations: tuple = STAGE_DILATIONS
    gate_activation: str = "gelu"

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.widths) != 4 or len(self.dilations) != 4:
            raise InvalidConfig("depths, widths and dilations need one entry per stage (4)")
        if any(d < 1 for d in self.depths):
            raise InvalidConfig(f"every stage needs at least one block, got depths {self.depths}")
        for c in self.widths:
            if c % self.head_dim:
                raise InvalidConfig(f"stage width {c} not divisible by head_dim {self.head_dim}")
        if self.window_size < 1 or self.num_classes < 1:
            raise InvalidConfig("window_size and num_classes must be positive")
        for ds in self.dilations:
            if any(d not in (2, 4, 8) for d in ds):
                raise InvalidConfig(f"dilations must be drawn from 2, 4, 8, got {ds}")


@dataclass(frozen=True)
class Published:
    params_m: float
    flops_g: float


# name: (stage depths, (stem width, stage widths), head_dim)
_TABLE = {
    "tiny": ((2, 3, 6, 2), (64, 64, 128, 256, 512), 32),
    "small": ((2, 3, 6, 2), (64, 96, 192, 384, 768), 32),
    "base": ((4, 6, 14, 2), (64, 96, 192, 384, 768), 32),
    "nano": ((1, 2, 4, 1), (64, 64, 128, 256, 512), 32),
    "pico": ((1, 2, 4, 1), (48, 48, 96, 192, 384), 24),
    "femto": ((1, 2, 4, 1), (32, 32, 64, 128, 256), 32),
    "micro": ((1, 1, 1, 1), (16, 16, 32, 64, 128), 8),
}

PUBLISHED = {
    "tiny": Published(28.367, 5.694),
    "small": Published(62.886, 11.59),
    "base": Published(103.576, 22.316),
    "nano": Published(16.649, 3.812),
    "pico": Published(9.55, 2.217),
    "femto": Published(4.4, 1.049),
}

VARIANTS = {
    name: ModelConfig(name, depths, widths[1:], widths[0], head_dim)
    for name, (depths, widths, head_dim) in _TABLE.items()
}

# published configurations, smallest first; "micro" is a desk-scale extra
PUBLISHED_VARIANTS = ("femto", "pico", "nano", "tiny", "small", "base")


def get_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise UnknownVariant(f"unknown variant {name!r}; valid names: {', '.join(VARIANTS)}")
    return replace(VARIANTS[name], **overrides)


class Layer(Module):
    """One conv block followed by one attention layer."""

    def __init__(self, c_in: int, c: int, stride: int, dilations, cfg: ModelConfig, init: Init):
        self.conv = AtrousMBConv(c_in, c, stride, cfg.expansion, cfg.se_ratio, cfg.gate_activation, init=init)
        self.attn = AtrousAttentionLayer(c, dilations, cfg.head_dim, cfg.window_size, cfg.mlp_ratio,
                                         cfg.gate_activation, init=init)

    def forward(self, x: Tensor) -> Tensor:
        return self.attn(self.conv(x))


class Head(Module):
    """GAP → LN → Linear → tanh → Linear."""

    def __init__(self, dim: int, num_classes: int, init: Init):
        self.norm = LayerNorm(dim, init=init)
        self.pre_logits = Linear(dim, dim, init=init)
        self.fc = Linear(dim, num_classes, init=init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(F.tanh(self.pre_logits(self.norm(F.global_avg_pool(x)))))


class AccVitModel(Module):
    def __init__(self, config: ModelConfig, init: Init):
        config.validate()
        self.config = config
        self.stem = Stem(config.in_channels, config.stem_width, init=init)
        self.stages = ModuleList()
        c_in = config.stem_width
        for depth, c, dil in zip(config.depths, config.widths, config.dilations):
            stage = ModuleList()
            for i in range(depth):
                stage.append(Layer(c_in if i == 0 else c, c, 2 if i == 0 else 1, dil, config, init))
            self.stages.append(stage)
            c_in = c
        self.head = Head(c_in, config.num_classes, init)

    def check_input(self, h: int, w: int) -> None:
        if h % 32 or w % 32:
            raise IndivisibleDims(f"input {h}x{w} must be divisible by 32")

    def features(self, images: Tensor) -> list[Tensor]:
        """Featuremaps after the stem and after each stage (1/2 … 1/32)."""
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise IndivisibleDims(f"expected [b, {self.config.in_channels}, H, W], got {images.shape}")
        self.check_input(*images.shape[2:])
        x = self.stem(images)
        maps = [x]
        for stage in self.stages:
            for layer in stage:
                x = layer(x)
            maps.append(x)
        return maps

    def forward(self, images: Tensor, return_stages: bool = False):
        maps = self.features(images)
        logits = self.head(maps[-1])
        return (logits, maps) if return_stages else logits


def build(config: ModelConfig | str, seed: int = 0, materialize: bool = True, dtype=np.float32) -> AccVitModel:
    """Construct a model with deterministic seeded weights.

    ``materialize=False`` builds zero-cost placeholder parameters, enough for
    parameter and FLOP analysis of the largest variants.
    """
    if isinstance(config, str):
        config = get_config(config)
    return AccVitModel(config, Init(seed, dtype=dtype, materialize=materialize))


def forward(model: AccVitModel, images: Tensor) -> Tensor:
    return model(images)
