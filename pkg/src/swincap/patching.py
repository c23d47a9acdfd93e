"""Patch embedding and window geometry on token grids.

Token layout conventions (frozen so checkpoints stay portable):

* patches flatten channel-major, then time (3D only), then row, then column;
* windows are enumerated row-major over the grid and tokens row-major inside
  each window;
* patch merging concatenates the 2x2 neighbourhood as (even row, even col),
  (odd row, even col), (even row, odd col), (odd row, odd col).

All functions accept a leading batch axis; windows of every batch element are
stacked along the window axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import LayerNorm, Linear, Module
from .ops import ConfigError, ShapeError
from .tensor import Tensor, mac_scope


@dataclass(frozen=True)
class PatchSpec:
    p: int
    C: int
    t: int = 1
    in_chans: int = 3

    def __post_init__(self):
        if self.p < 1 or self.t < 1 or self.C < 1:
            raise ConfigError(f"patch sizes and embed dim must be positive: {self}")


@dataclass
class FeatureGrid:
    """Tokens ``[B, N, C]`` laid out row-major on ``grid`` = (h, w) or (t, h, w)."""

    tokens: Tensor
    grid: tuple[int, ...]

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.tokens.ndim != 3:
            raise ShapeError(f"FeatureGrid tokens must be [B, N, C], got {self.tokens.shape}")
        if any(g < 1 for g in self.grid) or prod(self.grid) != self.tokens.shape[1]:
            raise ShapeError(f"grid {self.grid} does not hold {self.tokens.shape[1]} tokens")

    @property
    def C(self) -> int:
        return self.tokens.shape[2]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def is_video(self) -> bool:
        return len(self.grid) == 3

    def spatial(self) -> Tensor:
        """Tokens reshaped to ``[B, *grid, C]``."""
        return self.tokens.reshape((self.batch,) + self.grid + (self.C,))

    @classmethod
    def from_spatial(cls, x: Tensor) -> "FeatureGrid":
        grid = x.shape[1:-1]
        return cls(x.reshape(x.shape[0], prod(grid), x.shape[-1]), grid)


def _patchify(x: np.ndarray | Tensor, sizes: Sequence[int]) -> tuple[Tensor, tuple[int, ...]]:
    """``[B, Cin, *dims]`` -> ``[B, N, Cin*prod(sizes)]`` plus the patch grid."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    b, cin = x.shape[:2]
    dims = x.shape[2:]
    if len(dims) != len(sizes):
        raise ShapeError(f"input {x.shape} needs {len(sizes)} spatial axes")
    for d, s in zip(dims, sizes):
        if d % s:
            raise ConfigError(f"input extent {d} is not divisible by patch size {s}")
    grid = tuple(d // s for d, s in zip(dims, sizes))
    split = [b, cin]
    for g, s in zip(grid, sizes):
        split += [g, s]
    k = len(sizes)
    grid_axes = [2 + 2 * i for i in range(k)]
    inner_axes = [3 + 2 * i for i in range(k)]
    y = x.reshape(split).transpose([0] + grid_axes + [1] + inner_axes)
    return y.reshape(b, prod(grid), cin * prod(sizes)), grid


class PatchEmbed(Module):
    """Non-overlapping patch projection followed by LayerNorm.

    Equivalent to a stride-``p`` convolution with kernel ``p`` (``[t, p, p]`` for
    clips). Input is ``[B, Cin, H, W]`` or ``[B, Cin, T, H, W]``.
    """

    def __init__(self, spec: PatchSpec, rng: np.random.Generator, video: bool = False):
        self.spec = spec
        self.video = video
        self.sizes = (spec.t, spec.p, spec.p) if video else (spec.p, spec.p)
        self.proj = Linear(spec.in_chans * prod(self.sizes), spec.C, rng)
        self.norm = LayerNorm(spec.C)

    def forward(self, x) -> FeatureGrid:
        flat, grid = _patchify(x, self.sizes)
        with mac_scope("proj"):
            tokens = self.norm(self.proj(flat))
        return FeatureGrid(tokens, grid)


def patch_embed_2d(image, spec: PatchSpec, proj_weight: Tensor, proj_bias: Tensor,
                   ln_gamma: Tensor, ln_beta: Tensor, eps: float = 1e-5) -> FeatureGrid:
    """Functional 2D patch embedding; ``image`` is ``[Cin, H, W]`` or batched."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    flat, grid = _patchify(x, (spec.p, spec.p))
    tokens = ops.layernorm(ops.linear(flat, proj_weight, proj_bias), ln_gamma, ln_beta, eps)
    return FeatureGrid(tokens, grid)


def patch_embed_3d(clip, spec: PatchSpec, proj_weight: Tensor, proj_bias: Tensor,
                   ln_gamma: Tensor, ln_beta: Tensor, eps: float = 1e-5) -> FeatureGrid:
    """Functional 3D patch embedding; ``clip`` is ``[Cin, T, H, W]`` or batched."""
    x = clip if isinstance(clip, Tensor) else Tensor(clip)
    if x.ndim == 4:
        x = x.reshape((1,) + x.shape)
    flat, grid = _patchify(x, (spec.t, spec.p, spec.p))
    tokens = ops.layernorm(ops.linear(flat, proj_weight, proj_bias), ln_gamma, ln_beta, eps)
    return FeatureGrid(tokens, grid)


def effective_window(grid: Sequence[int], window: Sequence[int], clamp: bool = True) -> tuple[int, ...]:
    """Per-axis window, clamped to the grid extent when ``clamp`` is set."""
    if len(grid) != len(window):
        raise ShapeError(f"window {tuple(window)} has wrong rank for grid {tuple(grid)}")
    win = tuple(min(w, g) for w, g in zip(window, grid)) if clamp else tuple(window)
    for g, w in zip(grid, win):
        if w < 1 or g % w:
            raise ConfigError(f"grid {tuple(grid)} is not divisible by window {win}")
    return win


def window_partition(g: FeatureGrid, window: Sequence[int] | int) -> Tensor:
    """``[B, *grid, C]`` -> ``[B*nW, prod(window), C]``."""
    if isinstance(window, int):
        window = (window,) * len(g.grid)
    window = tuple(window)
    effective_window(g.grid, window, clamp=False)
    k = len(g.grid)
    split = [g.batch]
    for n, w in zip(g.grid, window):
        split += [n // w, w]
    split.append(g.C)
    outer = [1 + 2 * i for i in range(k)]
    inner = [2 + 2 * i for i in range(k)]
    x = g.spatial().reshape(split).transpose([0] + outer + inner + [2 * k + 1])
    return x.reshape(-1, prod(window), g.C)


def window_reverse(wins: Tensor, grid: Sequence[int], window: Sequence[int] | int,
                   batch: Optional[int] = None) -> FeatureGrid:
    """Exact inverse of :func:`window_partition`."""
    grid = tuple(grid)
    if isinstance(window, int):
        window = (window,) * len(grid)
    window = tuple(window)
    effective_window(grid, window, clamp=False)
    nw = prod(n // w for n, w in zip(grid, window))
    if wins.ndim != 3 or wins.shape[1] != prod(window) or wins.shape[0] % nw:
        raise ShapeError(f"windows {wins.shape} inconsistent with grid {grid} and window {window}")
    b = wins.shape[0] // nw if batch is None else batch
    if b * nw != wins.shape[0]:
        raise ShapeError(f"{wins.shape[0]} windows do not split into batch {b}")
    c = wins.shape[2]
    k = len(grid)
    x = wins.reshape([b] + [n // w for n, w in zip(grid, window)] + list(window) + [c])
    order = [0]
    for i in range(k):
        order += [1 + i, 1 + k + i]
    order.append(2 * k + 1)
    x = x.transpose(order)
    return FeatureGrid(x.reshape(b, prod(grid), c), grid)


def cyclic_shift(g: FeatureGrid, offsets: Sequence[int]) -> FeatureGrid:
    """``out[i, j] = in[(i - dy) mod h, (j - dx) mod w]`` (and likewise in time)."""
    offsets = tuple(int(o) for o in offsets)
    if len(offsets) != len(g.grid):
        raise ShapeError(f"offsets {offsets} do not match grid rank {len(g.grid)}")
    axes = tuple(range(1, 1 + len(g.grid)))
    shifted = ops.roll(g.spatial(), offsets, axes)
    return FeatureGrid.from_spatial(shifted)


def merge_tokens(g: FeatureGrid) -> tuple[Tensor, tuple[int, ...]]:
    """Gather each 2x2 spatial neighbourhood into one ``4C`` vector (time untouched)."""
    h, w = g.grid[-2:]
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even spatial grid, got {g.grid}")
    lead = g.grid[:-2]
    c = g.C
    x = g.spatial().reshape((g.batch,) + lead + (h // 2, 2, w // 2, 2, c))
    a = len(lead)
    # (B, *lead, h2, rowpar, w2, colpar, C) -> (B, *lead, h2, w2, colpar, rowpar, C)
    order = list(range(1 + a)) + [1 + a, 3 + a, 4 + a, 2 + a, 5 + a]
    x = x.transpose(order)
    grid = lead + (h // 2, w // 2)
    return x.reshape(g.batch, prod(grid), 4 * c), grid


class PatchMerging(Module):
    """2x2 neighbourhood concat, LayerNorm over ``4C``, linear ``4C -> 2C`` (no bias)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, g: FeatureGrid) -> FeatureGrid:
        x, grid = merge_tokens(g)
        return FeatureGrid(self.reduction(self.norm(x)), grid)


def patch_merge(g: FeatureGrid, reduce_weight: Tensor, ln_gamma: Optional[Tensor] = None,
                ln_beta: Optional[Tensor] = None, eps: float = 1e-5) -> FeatureGrid:
    """Functional patch merging; pass ``ln_gamma=None`` to skip the LayerNorm."""
    x, grid = merge_tokens(g)
    if reduce_weight.shape != (2 * g.C, 4 * g.C):
        raise ShapeError(f"reduce_weight must be {(2 * g.C, 4 * g.C)}, got {reduce_weight.shape}")
    if ln_gamma is not None:
        x = ops.layernorm(x, ln_gamma, ln_beta, eps)
    return FeatureGrid(ops.linear(x, reduce_weight), grid)
