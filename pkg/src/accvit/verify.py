"""Self-verification suites: oracles, gradient checks, gate properties, shapes, audit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .attention import AtrousAttentionLayer, WindowedMHSA, to_channels_first, to_channels_last
from .audit import PARAM_TOLERANCE, FLOP_TOLERANCE, estimate_flops
from .conv_blocks import AtrousMBConv
from .gating import GateUnit
from .gradcheck import gradcheck
from .model import PUBLISHED_VARIANTS, build, get_config
from .nn import Init
from .partition import (
    departition, gather_oracle, nested_phase_order, partition, window_merge, window_split,
)
from .tensor import Tensor, concat, matmul, no_grad, sqrt, stack, take

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
GATE_TOL = 1e-6
S4_TOL = 1e-6


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

def random_partition_case(rng: np.random.Generator):
    d = int(rng.choice([1, 2, 4, 8]))
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = d * int(rng.integers(1, 4)), d * int(rng.integers(1, 4))
    return rng.standard_normal((b, c, h, w)).astype(np.float32), d


def partition_suite(cases: int = 1000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    oracle_ok = round_ok = perm_ok = 0
    for _ in range(cases):
        x, d = random_partition_case(rng)
        p = partition(Tensor(x), d)
        oracle_ok += np.array_equal(p.phases.data, gather_oracle(x, d))
        round_ok += np.array_equal(departition(p).data, x)
        perm_ok += np.array_equal(np.sort(p.phases.data, axis=None), np.sort(x, axis=None))
    win_ok = 0
    for _ in range(cases // 10):
        P = int(rng.integers(1, 8))
        x = rng.standard_normal((int(rng.integers(1, 3)), 2, P * int(rng.integers(1, 3)), P * int(rng.integers(1, 3))))
        win_ok += np.array_equal(window_merge(window_split(Tensor(x), P)).data, x)
    x = rng.standard_normal((2, 3, 16, 16))
    nested = partition(partition(Tensor(x), 2).phases, 2).phases.data.reshape(2, 16, 3, 4, 4)
    direct = partition(Tensor(x), 4).phases.data.reshape(2, 16, 3, 4, 4)
    nested_ok = np.array_equal(nested, direct[:, nested_phase_order(2, 2)])
    return [
        Check("partition matches gather oracle", oracle_ok == cases, f"{oracle_ok}/{cases}"),
        Check("departition(partition(x)) bit-identical", round_ok == cases, f"{round_ok}/{cases}"),
        Check("partition preserves the value multiset", perm_ok == cases, f"{perm_ok}/{cases}"),
        Check("window_merge(window_split(x)) bit-identical", win_ok == cases // 10, f"{win_ok}/{cases // 10}"),
        Check("nested 2x2 partition equals dilation-4 partition up to phase order", nested_ok),
    ]


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _leaf(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.2)
    return Tensor(x, requires_grad=True)


def primitive_cases(seed: int = 0) -> Iterator[tuple[str, Callable, list]]:
    """(name, fn, leaves) for every differentiable primitive, at float64."""
    rng = np.random.default_rng(seed)
    L = lambda *s, **k: _leaf(rng, *s, **k)  # noqa: E731
    a, b, c = L(3, 4), L(4), L(3, 1)
    yield "add (broadcast)", (lambda: a + b + c), [a, b, c]
    a2, b2 = L(3, 4), L(1, 4)
    yield "sub (broadcast)", (lambda: a2 - b2), [a2, b2]
    a3, b3 = L(2, 3), L(2, 1)
    yield "mul (broadcast)", (lambda: a3 * b3 * 1.5), [a3, b3]
    a4, b4 = L(2, 3), L(2, 3, away_from_zero=True)
    yield "div", (lambda: a4 / b4), [a4, b4]
    x = L(5)
    yield "neg", (lambda: -x), [x]
    xp = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)
    yield "pow", (lambda: xp ** 2.5), [xp]
    yield "exp", (lambda: xp.exp()), [xp]
    yield "log", (lambda: xp.log()), [xp]
    yield "sqrt", (lambda: sqrt(xp)), [xp]
    s = L(2, 3, 4)
    yield "sum (axis)", (lambda: s.sum(axis=(0, 2), keepdims=True)), [s]
    yield "mean", (lambda: s.mean(axis=1)), [s]
    yield "reshape", (lambda: s.reshape(6, 4)), [s]
    yield "permute", (lambda: s.permute(2, 0, 1)), [s]
    yield "slice", (lambda: s[1, :, 1:3]), [s]
    c1, c2 = L(2, 3), L(2, 2)
    yield "concat", (lambda: concat([c1, c2], axis=1)), [c1, c2]
    yield "stack", (lambda: stack([c1, c1 * 2.0], axis=0)), [c1]
    tbl = L(5, 2)
    idx = rng.integers(0, 5, (3, 3))
    yield "take (gather rows)", (lambda: take(tbl, idx)), [tbl]
    m1, m2 = L(2, 3, 4), L(2, 4, 5)
    yield "matmul (batched)", (lambda: matmul(m1, m2)), [m1, m2]
    m3 = L(4, 2)
    yield "matmul (2-d rhs)", (lambda: matmul(m1, m3)), [m1, m3]
    z = L(3, 5, away_from_zero=True)
    yield "relu", (lambda: F.relu(z)), [z]
    yield "sigmoid", (lambda: F.sigmoid(z)), [z]
    yield "tanh", (lambda: F.tanh(z)), [z]
    yield "gelu", (lambda: F.gelu(z)), [z]
    yield "softmax", (lambda: F.softmax(z, axis=0)), [z]
    yield "log_softmax", (lambda: F.log_softmax(z, axis=-1)), [z]
    tgt = rng.integers(0, 5, 3)
    yield "cross_entropy (label smoothing)", (lambda: F.cross_entropy(z, tgt, 0.1)), [z]
    xn, gm, bt = L(2, 3, 6), L(6), L(6)
    yield "layer_norm (last axis)", (lambda: F.layer_norm(xn, gm, bt)), [xn, gm, bt]
    xc, gc, bc = L(2, 4, 3, 3), L(4), L(4)
    yield "layer_norm (channel axis)", (lambda: F.layer_norm(xc, gc, bc, axis=1)), [xc, gc, bc]
    xl, wl, bl = L(2, 3, 4), L(5, 4), L(5)
    yield "linear", (lambda: F.linear(xl, wl, bl)), [xl, wl, bl]
    xi = L(2, 4, 7, 7)
    for name, shape, kw in [
        ("conv2d", (3, 4, 3, 3), dict(padding=1)),
        ("conv2d (stride 2)", (3, 4, 3, 3), dict(stride=2, padding=1)),
        ("conv2d (dilation 2)", (3, 4, 3, 3), dict(padding=2, dilation=2)),
        ("conv2d (groups 2)", (4, 2, 3, 3), dict(padding=1, groups=2)),
        ("conv2d (depthwise, dilation 3, stride 2)", (4, 1, 3, 3), dict(padding=3, dilation=3, stride=2, groups=4)),
        ("conv2d (1x1)", (5, 4, 1, 1), dict()),
    ]:
        wk, bk = L(*shape), L(shape[0])
        yield name, (lambda wk=wk, bk=bk, kw=kw: F.conv2d(xi, wk, bk, **kw)), [xi, wk, bk]
    xa = L(2, 3, 4, 6)
    yield "avg_pool2d", (lambda: F.avg_pool2d(xa, 2)), [xa]
    yield "global_avg_pool", (lambda: F.global_avg_pool(xa)), [xa]
    gw = Tensor(rng.uniform(0.1, 1.0, (3, 2, 1, 4)), requires_grad=True)
    ys = L(3, 2, 5, 4)
    yield "convex_combine", (lambda: F.convex_combine(gw, ys)), [gw, ys]
    xd = L(1, 2, 8, 8)
    yield "departition(partition(x, 4))", (lambda: departition(partition(xd, 4))), [xd]
    yield "partition(x, 2)", (lambda: partition(xd, 2).phases), [xd]
    yield "window_split(x, 4)", (lambda: window_split(xd, 4).windows), [xd]


def _perturbed(module, rng, scale: float = 0.3):
    """Move every parameter off its (often zero) initial value."""
    module.to(np.float64)
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return module


def composite_cases(seed: int = 0) -> Iterator[tuple[str, Callable, list]]:
    rng = np.random.default_rng(seed)
    init = Init(seed, dtype=np.float64, std=0.3)
    m = _perturbed(WindowedMHSA(8, 4, 2, init=init), rng)
    x = _leaf(rng, 3, 4, 8)
    yield "W-MHSA window (c=8, P=2, 2 heads)", (lambda: m(x)), [x] + m.parameters()
    g = _perturbed(GateUnit(4, 3, init=init), rng)
    xg = _leaf(rng, 2, 4, 3, 3)
    ys = [_leaf(rng, 2, 4, 3, 3) for _ in range(3)]
    yield "GateUnit fuse (k=3, c=4)", (lambda: g.fuse(xg, ys)), [xg] + ys + g.parameters()
    a = _perturbed(AtrousAttentionLayer(8, (2,), head_dim=4, window_size=2, init=init), rng)
    xa = _leaf(rng, 1, 8, 8, 8)
    yield "AtrousAttentionLayer (c=8, levels {2}, P=2, 8x8)", (lambda: a(xa)), [xa] + a.parameters()
    mb = _perturbed(AtrousMBConv(4, 4, 1, init=init), rng)
    xm = _leaf(rng, 1, 4, 8, 8)
    yield "AtrousMBConv (c=4, 8x8)", (lambda: mb(xm)), [xm] + mb.parameters()


def gradcheck_suite(seed: int = 0) -> list[Check]:
    checks = []
    for name, fn, leaves in primitive_cases(seed):
        r = gradcheck(fn, leaves, seed=seed)
        checks.append(Check(f"gradcheck {name}", r.passed(PRIMITIVE_TOL), f"rel err {r.max_rel_error:.2e}"))
    for name, fn, leaves in composite_cases(seed):
        r = gradcheck(fn, leaves, seed=seed)
        checks.append(Check(f"gradcheck {name}", r.passed(COMPOSITE_TOL), f"rel err {r.max_rel_error:.2e}"))
    return checks


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------

def gating_suite(cases: int = 1000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_sum = 0.0
    contained = 0
    with no_grad():
        for i in range(cases):
            k = int(rng.integers(1, 5))
            c = int(rng.integers(1, 5))
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            unit = GateUnit(c, k, init=Init(i, std=float(rng.uniform(0.1, 3.0))))
            unit.proj.bias.data = rng.standard_normal(k * c).astype(np.float32)
            x = Tensor(rng.standard_normal((2, c, h, w)).astype(np.float32) * 3)
            g = unit.weights(x).data
            worst_sum = max(worst_sum, float(np.abs(g.astype(np.float64).sum(axis=0) - 1).max()))
            ys = rng.standard_normal((k, 2, c, h, w)).astype(np.float32)
            out = unit.fuse(x, [Tensor(y) for y in ys]).data
            contained += bool(np.all(out >= ys.min(axis=0)) and np.all(out <= ys.max(axis=0)))
        unit = GateUnit(3, 1, init=Init(seed, std=2.0))
        ones = unit.weights(Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))).data
    return [
        Check("gate weights sum to 1 over branches", worst_sum <= GATE_TOL, f"max |Σg − 1| = {worst_sum:.1e}"),
        Check("fused output inside branch envelope", contained == cases, f"{contained}/{cases}"),
        Check("single-branch gate is exactly 1", bool(np.all(ones == 1.0))),
    ]


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def reference_window_layer(layer: AtrousAttentionLayer, x: Tensor) -> Tensor:
    """Plain windowed transformer layer assembled from the layer's own weights."""
    branch = layer.branches[0]
    P = min(branch.attn.window_size, x.shape[2], x.shape[3])
    grid = window_split(x, P)
    attended = branch.attn(type(grid)(branch.norm(grid.windows), P, grid.grid, grid.source_shape))
    y = to_channels_last(window_merge(attended) + x)
    return to_channels_first(layer.mlp(layer.mlp_norm(y)) + y)


def shapes_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = build("tiny", seed=seed)
    x = Tensor(rng.standard_normal((1, 3, 224, 224)).astype(np.float32))
    with no_grad():
        logits, maps = model(x, return_stages=True)
        sizes = [m.shape[2] for m in maps]
        s4 = model.stages[3][0].attn
        feat = Tensor(rng.standard_normal((1, s4.dim, 7, 7)).astype(np.float32))
        diff = float(np.abs(s4(feat).data - reference_window_layer(s4, feat).data).max())
    return [
        Check("tiny @224 stage sizes 112/56/28/14/7", sizes == [112, 56, 28, 14, 7], str(sizes)),
        Check("tiny @224 logits 1x1000 and finite",
              logits.shape == (1, 1000) and bool(np.isfinite(logits.data).all()), str(logits.shape)),
        Check("S4 layer equals plain windowed transformer layer", diff <= S4_TOL, f"max diff {diff:.1e}"),
    ]


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def audit_suite(check_flops: bool = False) -> list[Check]:
    checks = []
    for name in PUBLISHED_VARIANTS:
        r = estimate_flops(build(get_config(name), materialize=False))
        checks.append(Check(f"{name} params within ±{PARAM_TOLERANCE:.0%}", r.params_ok(),
                            f"{r.params / 1e6:.3f}M vs {r.published_params / 1e6:.3f}M, {100 * r.params_delta:+.2f}%"))
        if check_flops:
            checks.append(Check(f"{name} FLOPs within ±{FLOP_TOLERANCE:.0%}", r.flops_ok(),
                                f"{r.flops / 1e9:.3f}G vs {r.published_flops / 1e9:.3f}G, {100 * r.flops_delta:+.1f}%"))
    return checks


SUITES = {
    "partition": partition_suite,
    "gradcheck": gradcheck_suite,
    "gating": gating_suite,
    "shapes": shapes_suite,
    "audit": audit_suite,
}


def run(suite: str) -> list[Check]:
    if suite == "all":
        return [c for fn in SUITES.values() for c in fn()]
    return SUITES[suite]()
