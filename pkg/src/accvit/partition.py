"""Dilated (atrous) partitioning of featuremaps and non-overlapping windowing.

Phase layout convention, used everywhere in the package:

    rearrange(x, 'b c (h hs) (w ws) -> (b hs ws) c h w', hs=d, ws=d)

Phase ``(ph, pw)`` of sample ``n`` sits at batch index ``n·d² + ph·d + pw`` and
holds ``x[n, :, i·d + ph, j·d + pw]`` at position ``(i, j)``. All functions here
are pure index permutations, so every round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleDims, InconsistentMetadata, ShapeMismatch
from .tensor import Tensor

VALID_DILATIONS = (1, 2, 4, 8)


@dataclass(frozen=True)
class DilatedPartition:
    phases: Tensor
    dilation: int
    original_shape: tuple

    def phase(self, sample: int, ph: int, pw: int) -> Tensor:
        d = self.dilation
        return self.phases[sample * d * d + ph * d + pw]


@dataclass(frozen=True)
class WindowGrid:
    windows: Tensor
    window_size: int
    grid: tuple
    source_shape: tuple


def partition(x: Tensor, dilation: int) -> DilatedPartition:
    """Split ``x [b,c,h,w]`` into its d² strided phase sub-images."""
    d = int(dilation)
    if d not in VALID_DILATIONS:
        raise IndivisibleDims(f"dilation must be one of {VALID_DILATIONS}, got {d}")
    if x.ndim != 4:
        raise ShapeMismatch(f"partition expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    if h % d or w % d:
        raise IndivisibleDims(f"dilation {d} does not divide spatial size {h}x{w}")
    if d == 1:
        return DilatedPartition(x, 1, tuple(x.shape))
    y = x.reshape(b, c, h // d, d, w // d, d).permute(0, 3, 5, 1, 2, 4)
    return DilatedPartition(y.reshape(b * d * d, c, h // d, w // d), d, tuple(x.shape))


def departition(p: DilatedPartition) -> Tensor:
    """Exact inverse of :func:`partition`."""
    d = p.dilation
    b, c, h, w = p.original_shape
    if d < 1 or h % d or w % d or p.phases.shape != (b * d * d, c, h // d, w // d):
        raise InconsistentMetadata(
            f"phases {p.phases.shape} inconsistent with dilation {d} and source {p.original_shape}"
        )
    if d == 1:
        return p.phases
    y = p.phases.reshape(b, d, d, c, h // d, w // d).permute(0, 3, 4, 1, 5, 2)
    return y.reshape(b, c, h, w)


def nested_phase_order(d1: int, d2: int) -> np.ndarray:
    """Phase reordering between nested and direct partitioning.

    Partitioning by ``d1`` and then each phase by ``d2`` yields phases in batch
    order ``(ph1, pw1, ph2, pw2)``; it equals ``partition(x, d1·d2)`` with phase
    ``(d1·ph2 + ph1, d1·pw2 + pw1)``. Returns, for each nested phase slot, the
    index of the matching direct phase.
    """
    d = d1 * d2
    order = []
    for ph1 in range(d1):
        for pw1 in range(d1):
            for ph2 in range(d2):
                for pw2 in range(d2):
                    order.append((d1 * ph2 + ph1) * d + (d1 * pw2 + pw1))
    return np.asarray(order, dtype=np.int64)


def window_split(x: Tensor, window_size: int) -> WindowGrid:
    """Tile ``x [b,c,h,w]`` into P×P windows → ``[b·gh·gw, P², c]``.

    Windows are ordered batch-major then row-major over the grid; tokens within
    a window are row-major.
    """
    P = int(window_size)
    if x.ndim != 4:
        raise ShapeMismatch(f"window_split expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    if P < 1 or h % P or w % P:
        raise IndivisibleDims(f"window size {P} does not divide spatial size {h}x{w}")
    gh, gw = h // P, w // P
    y = x.reshape(b, c, gh, P, gw, P).permute(0, 2, 4, 3, 5, 1)
    return WindowGrid(y.reshape(b * gh * gw, P * P, c), P, (gh, gw), tuple(x.shape))


def window_merge(grid: WindowGrid) -> Tensor:
    """Exact inverse of :func:`window_split`."""
    b, c, h, w = grid.source_shape
    P = grid.window_size
    gh, gw = grid.grid
    if gh * P != h or gw * P != w or grid.windows.shape != (b * gh * gw, P * P, c):
        raise InconsistentMetadata(f"windows {grid.windows.shape} inconsistent with source {grid.source_shape}")
    y = grid.windows.reshape(b, gh, gw, P, P, c).permute(0, 5, 1, 3, 2, 4)
    return y.reshape(b, c, h, w)


def gather_oracle(x: np.ndarray, d: int) -> np.ndarray:
    """Reference partition built element by element from the index formula."""
    b, c, h, w = x.shape
    out = np.empty((b * d * d, c, h // d, w // d), dtype=x.dtype)
    for n in range(b):
        for ph in range(d):
            for pw in range(d):
                rows = np.arange(h // d) * d + ph
                cols = np.arange(w // d) * d + pw
                out[n * d * d + ph * d + pw] = x[n][:, rows[:, None], cols[None, :]]
    return out
