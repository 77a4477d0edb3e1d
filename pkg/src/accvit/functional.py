"""Differentiable neural-network primitives built on :mod:`accvit.tensor`.

Each primitive is a single tape node with a hand-written backward rule, which
keeps graphs small and makes every rule individually gradient-checkable.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import IndivisibleDims, InvalidGroups, ShapeMismatch
from .tensor import Tensor, as_tensor, make, unbroadcast

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    d = x.data
    inner = GELU_C * (d + GELU_A * (d * d * d))
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def rule(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return make("gelu", out, (x,), rule)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make("softmax", out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``logits [n, k]`` against integer ``targets [n]``.

    The target distribution is (1 − ε)·onehot + ε/k.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy expects [n,k] logits and [n] targets, got {logits.shape}, {targets.shape}")
    n, k = logits.shape
    eps = float(label_smoothing)
    q = np.full((n, k), eps / k, dtype=logits.dtype)
    q[np.arange(n), targets] += 1.0 - eps
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = np.asarray(-(q * logp).sum() / n, dtype=logits.dtype)
    p = np.exp(logp)
    return make("cross_entropy", loss, (logits,), lambda g: (g * (p - q) / n,))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along ``axis`` then apply a per-feature affine map.

    ``axis=-1`` is the usual channels-last layer norm; ``axis=1`` on a
    ``[b,c,h,w]`` map normalizes across channels at every pixel.
    """
    axis = axis % x.ndim
    n = x.shape[axis]
    for p in (gamma, beta):
        if p is not None and p.shape != (n,):
            raise ShapeMismatch(f"layer_norm affine parameter shape {p.shape}, expected ({n},)")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    red = tuple(i for i in range(x.ndim) if i != axis)

    def rule(g):
        dxhat = g * gd if gd is not None else g
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        grads = [inv * (dxhat - m1 - xhat * m2)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return make("layer_norm", out, parents, rule)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x [..., in] @ weightᵀ + bias`` with ``weight [out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make("linear", out, parents, rule)


def _out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over ``x [b, c_in, h, w]``.

    Implemented as a sum over kernel taps: each tap is a strided view of the
    zero-padded input. Grouped convolutions contract each tap stack with a
    matmul; depthwise convolutions (one input channel per group) skip the
    matmul and scale each tap per channel.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise InvalidGroups(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeMismatch(f"conv2d weight {weight.shape} expects {cg * groups} input channels, got {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d bias {bias.shape}, expected ({cout},)")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d output would be empty for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def view(arr, i, j):
        r0, c0 = i * dilation, j * dilation
        return arr[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]

    depthwise = cg == 1 and cout == cin == groups
    wd = weight.data
    if depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
        for t, (i, j) in enumerate(taps):
            out += view(xp, i, j) * wd[:, 0, i, j][None, :, None, None]
        cols = None
    else:
        # cols[b, g, cg*kh*kw, ho*wo] ordered (channel, tap) to match weight.reshape
        cols = np.stack([view(xp, i, j) for (i, j) in taps], axis=2)
        cols = cols.reshape(b, groups, cg * kh * kw, ho * wo)
        wm = wd.reshape(groups, cout // groups, cg * kh * kw)
        out = np.matmul(wm[None], cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = [x, weight] + ([bias] if bias is not None else [])

    def rule(g):
        gx = gw = None
        if depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wd)
                for i, j in taps:
                    gw[:, 0, i, j] = (g * view(xp, i, j)).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i, j in taps:
                    view(gxp, i, j)[...] += g * wd[:, 0, i, j][None, :, None, None]
                gx = gxp
        else:
            g3 = g.reshape(b, groups, cout // groups, ho * wo)
            if weight.requires_grad:
                gw = np.einsum("bgol,bgkl->gok", g3, cols, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(wm, 1, 2)[None], g3)
                gcols = gcols.reshape(b, cin, kh * kw, ho, wo)
                gxp = np.zeros_like(xp)
                for t, (i, j) in enumerate(taps):
                    view(gxp, i, j)[...] += gcols[:, :, t]
                gx = gxp
        if gx is not None and padding:
            gx = np.ascontiguousarray(gx[:, :, padding:padding + h, padding:padding + w])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make("conv2d", out, parents, rule)


# ---------------------------------------------------------------------------
# convex combination
# ---------------------------------------------------------------------------

def convex_combine(g: Tensor, ys: Tensor) -> Tensor:
    """Weighted mean over axis 0: Σᵢ gᵢ·yᵢ / Σᵢ gᵢ, with ``g`` broadcasting to ``ys``.

    Accumulates in float64 and rounds once, so for float32 inputs the result
    lies inside the elementwise [minᵢ yᵢ, maxᵢ yᵢ] envelope exactly and equal
    branches pass through unchanged. Normalizing by Σg absorbs the last-ulp
    drift of a softmax.
    """
    try:
        np.broadcast_shapes(g.shape, ys.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"convex_combine: gate {g.shape} vs branches {ys.shape}") from exc
    g64 = g.data.astype(np.float64)
    y64 = ys.data.astype(np.float64)
    s = g64.sum(axis=0)
    out64 = (g64 * y64).sum(axis=0) / s
    out = out64.astype(ys.dtype)

    def rule(gr):
        gr64 = gr.astype(np.float64) / s
        gg = unbroadcast(gr64[None] * (y64 - out64[None]), g.shape) if g.requires_grad else None
        gy = np.broadcast_to(g64 * gr64[None], ys.shape) if ys.requires_grad else None
        return (
            None if gg is None else gg.astype(g.dtype),
            None if gy is None else gy.astype(ys.dtype),
        )

    return make("convex_combine", out, (g, ys), rule)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k average pooling; spatial dims must be multiples of k."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise IndivisibleDims(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def rule(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * scale, (b, c, h // k, k, w // k, k))
        return (gx.reshape(b, c, h, w),)

    return make("avg_pool2d", out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims of ``[b, c, h, w]`` → ``[b, c]``."""
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


__all__ = [
    "relu", "sigmoid", "tanh", "gelu", "softmax", "log_softmax", "cross_entropy",
    "layer_norm", "linear", "conv2d", "convex_combine", "avg_pool2d", "global_avg_pool",
    "as_tensor", "unbroadcast",
]
