"""Analytic parameter and FLOP accounting.

Counting convention (batch 1 unless stated):

* conv / linear / attention matmuls: 2 FLOPs per multiply-accumulate, plus one
  per output element for a bias; MACs are tracked alongside.
* activations, residual adds, scalings, pooling: 1 FLOP per element touched.
* softmax: 3 FLOPs per element (exp, sum, divide).
* normalization: 5 FLOPs per element (mean, center, variance, scale, affine).
* gated fusion over k branches: 2k − 1 FLOPs per output element.

Every module gets one row holding its *own* parameters and *own* FLOPs
(children excluded), so rows sum exactly to the totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import AtrousAttentionLayer, AttentionBranch, WindowedMHSA, effective_window
from .conv_blocks import AtrousMBConv, DilatedBranch, SqueezeExcite, Stem
from .errors import IndivisibleDims
from .gating import GateUnit
from .model import PUBLISHED, AccVitModel, Head, Layer
from .nn import Conv2d, LayerNorm, Linear, Module

PARAM_TOLERANCE = 0.02
FLOP_TOLERANCE = 0.05

NORM_FLOPS = 5
SOFTMAX_FLOPS = 3


@dataclass
class Row:
    name: str
    kind: str
    params: int = 0
    flops: int = 0
    macs: int = 0


@dataclass
class AuditReport:
    variant: str
    resolution: tuple
    rows: list = field(default_factory=list)
    published_params: float | None = None  # absolute count
    published_flops: float | None = None

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @staticmethod
    def _delta(value, ref):
        return None if ref is None else (value - ref) / ref

    @property
    def params_delta(self):
        return self._delta(self.params, self.published_params)

    @property
    def flops_delta(self):
        return self._delta(self.flops, self.published_flops)

    @property
    def macs_delta(self):
        return self._delta(self.macs, self.published_flops)

    def params_ok(self, tol: float = PARAM_TOLERANCE) -> bool:
        d = self.params_delta
        return d is None or abs(d) <= tol

    def flops_ok(self, tol: float = FLOP_TOLERANCE) -> bool:
        d = self.flops_delta
        return d is None or abs(d) <= tol

    def to_tsv(self) -> str:
        """``module<TAB>params<TAB>flops`` per module, then a ``total`` line."""
        lines = [f"{r.name or 'model'}\t{r.params}\t{r.flops}" for r in self.rows]
        lines.append(f"total\t{self.params}\t{self.flops}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        h, w = self.resolution

        def fmt(value, ref, scale, unit):
            line = f"{value / scale:10.3f} {unit}"
            if ref is not None:
                line += f"   published {ref / scale:8.3f} {unit}   delta {100 * (value - ref) / ref:+6.2f}%"
            return line

        out = [
            f"variant     {self.variant} @ {h}x{w}",
            f"params      {fmt(self.params, self.published_params, 1e6, 'M')}",
            f"FLOPs       {fmt(self.flops, self.published_flops, 1e9, 'G')}   (2 per multiply-accumulate)",
            f"MACs        {fmt(self.macs, self.published_flops, 1e9, 'G')}",
        ]
        return "\n".join(out) + "\n"

    def table(self) -> str:
        width = max(len(r.name or "model") for r in self.rows)
        lines = [f"{'module':<{width}}  {'kind':<20} {'params':>12} {'FLOPs':>16}"]
        for r in self.rows:
            lines.append(f"{r.name or 'model':<{width}}  {r.kind:<20} {r.params:>12,d} {r.flops:>16,d}")
        lines.append(f"{'total':<{width}}  {'':<20} {self.params:>12,d} {self.flops:>16,d}")
        return "\n".join(lines) + "\n"


def count_params(module: Module) -> int:
    return sum(p.size for p in module.parameters())


class _Counter:
    def __init__(self, root: Module):
        self.rows: dict[int, Row] = {}
        self.order: list[Row] = []
        for name, mod in root.named_modules():
            r = Row(name, type(mod).__name__, sum(p.size for p in mod.direct_parameters()))
            self.rows[id(mod)] = r
            self.order.append(r)

    def add(self, mod: Module, flops: int, macs: int = 0) -> None:
        r = self.rows[id(mod)]
        r.flops += int(flops)
        r.macs += int(macs)

    # -- leaves ---------------------------------------------------------
    def conv(self, m: Conv2d, b: int, h: int, w: int) -> tuple[int, int]:
        ho, wo = m.out_size(h, w)
        out = b * m.out_channels * ho * wo
        macs = out * (m.in_channels // m.groups) * m.kernel_size ** 2
        self.add(m, 2 * macs + (out if m.bias is not None else 0), macs)
        return ho, wo

    def linear(self, m: Linear, n: int) -> None:
        macs = n * m.in_features * m.out_features
        self.add(m, 2 * macs + (n * m.out_features if m.bias is not None else 0), macs)

    def norm(self, m: LayerNorm, elems: int) -> None:
        self.add(m, NORM_FLOPS * elems)

    # -- composites -----------------------------------------------------
    def stem(self, m: Stem, b: int, h: int, w: int):
        h, w = self.conv(m.conv1, b, h, w)
        self.add(m, b * m.width * h * w)
        return self.conv(m.conv2, b, h, w)

    def gate(self, m: GateUnit, b: int, h: int, w: int, branch_channels: int) -> None:
        self.conv(m.proj, b, h, w)
        logits = b * m.branches * m.out_channels * h * w
        k = m.branches
        self.add(m, logits + SOFTMAX_FLOPS * logits + (2 * k - 1) * b * branch_channels * h * w)

    def se(self, m: SqueezeExcite, b: int, h: int, w: int) -> None:
        c = m.channels
        self.add(m, b * c * h * w)  # global pool
        self.linear(m.reduce, b)
        self.add(m, b * m.reduce.out_features)  # gelu
        self.linear(m.expand, b)
        self.add(m, b * c + b * c * h * w)  # sigmoid, scaling

    def mbconv(self, m: AtrousMBConv, b: int, h: int, w: int):
        ci, c = m.in_channels, m.out_channels
        mid = m.expand.out_channels
        self.norm(m.pre_norm, b * ci * h * w)
        self.conv(m.expand, b, h, w)
        self.norm(m.expand_norm, b * mid * h * w)
        self.add(m, b * mid * h * w)  # gelu
        for br in m.branches:
            ho, wo = self.branch(br, b, h, w)
        if m.stride == 2:
            self.add(m, b * ci * h * w)  # pooled input, shared by gate and shortcut
        self.gate(m.gate, b, ho, wo, mid)
        self.se(m.se, b, ho, wo)
        self.conv(m.project, b, ho, wo)
        if m.shortcut is not None:
            self.conv(m.shortcut, b, ho, wo)
        self.add(m, b * c * ho * wo)  # residual add
        return ho, wo

    def branch(self, m: DilatedBranch, b: int, h: int, w: int):
        ho, wo = self.conv(m.conv, b, h, w)
        self.norm(m.norm, b * m.conv.out_channels * ho * wo)
        self.add(m, b * m.conv.out_channels * ho * wo)
        return ho, wo

    def wmhsa(self, m: WindowedMHSA, n: int, window: int) -> None:
        T = window * window
        c, H = m.dim, m.num_heads
        self.linear(m.qkv, n * T)
        score_macs = n * T * T * c  # QKᵀ over all heads; AV has the same count
        scores = n * H * T * T
        self.add(m, 2 * 2 * score_macs + n * T * c + scores + SOFTMAX_FLOPS * scores, 2 * score_macs)
        self.linear(m.proj, n * T)

    def attn_branch(self, m: AttentionBranch, b: int, c: int, h: int, w: int) -> None:
        d = m.dilation
        hs, ws = h // d, w // d
        P = effective_window(hs, ws, m.attn.window_size)
        n = b * d * d * (hs // P) * (ws // P)
        self.norm(m.norm, b * c * h * w)
        self.wmhsa(m.attn, n, P)
        self.add(m, b * c * h * w)  # residual add

    def attention(self, m: AtrousAttentionLayer, b: int, h: int, w: int) -> None:
        c = m.dim
        for br in m.branches:
            self.attn_branch(br, b, c, h, w)
        self.gate(m.gate, b, h, w, c)
        self.norm(m.mlp_norm, b * c * h * w)
        self.linear(m.mlp.fc1, b * h * w)
        self.add(m.mlp, b * m.mlp.fc1.out_features * h * w)  # gelu
        self.linear(m.mlp.fc2, b * h * w)
        self.add(m, b * c * h * w)  # residual add

    def layer(self, m: Layer, b: int, h: int, w: int):
        h, w = self.mbconv(m.conv, b, h, w)
        self.attention(m.attn, b, h, w)
        return h, w

    def head(self, m: Head, b: int, h: int, w: int) -> None:
        c = m.norm.dim
        self.add(m, b * c * h * w + b * c)  # global pool, tanh
        self.norm(m.norm, b * c)
        self.linear(m.pre_logits, b)
        self.linear(m.fc, b)


def estimate_flops(model: AccVitModel, resolution=(224, 224), batch: int = 1) -> AuditReport:
    """Per-module parameters and FLOPs for one forward pass at ``resolution``."""
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    H, W = resolution
    model.check_input(H, W)
    counter = _Counter(model)
    h, w = counter.stem(model.stem, batch, H, W)
    for stage in model.stages:
        for layer in stage:
            h, w = counter.layer(layer, batch, h, w)
    counter.head(model.head, batch, h, w)
    name = model.config.name
    pub = PUBLISHED.get(name)
    default_head = model.config.num_classes == 1000 and model.config.in_channels == 3
    report = AuditReport(name, (H, W), counter.order)
    if pub is not None and default_head:
        report.published_params = pub.params_m * 1e6
        if (H, W) == (224, 224) and batch == 1:
            report.published_flops = pub.flops_g * 1e9
    return report


def audit(model: AccVitModel, resolution=(224, 224)) -> AuditReport:
    return estimate_flops(model, resolution)


__all__ = ["AuditReport", "Row", "audit", "count_params", "estimate_flops", "IndivisibleDims"]
