"""Hierarchical window encoders (image and video) producing the decoder memory."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mixers import MIXER_KINDS, WindowAttention, build_mixer
from .nn import FeedForward, LayerNorm, Linear, Module
from .ops import ConfigError, ShapeError
from .patching import (
    FeatureGrid,
    PatchEmbed,
    PatchMerging,
    PatchSpec,
    cyclic_shift,
    window_partition,
    window_reverse,
)
from .tensor import Tensor, mac_scope

DEFAULT_HEADS = (4, 8, 16, 32)


@dataclass
class EncoderConfig:
    """Architecture of the vision encoder.

    ``img_size`` is ``(H, W)``; for video set ``frames`` (T), ``tubelet`` (t)
    and ``temporal_window`` (P). The window per stage is ``min(window, side)``
    unless ``clamp_window`` is off.
    """

    img_size: tuple[int, int] = (224, 224)
    patch_size: int = 4
    embed_dim: int = 128
    depths: tuple[int, ...] = (2, 2, 18, 2)
    heads: tuple[int, ...] = DEFAULT_HEADS
    window: int = 14
    mixer: str = "w_mlp"
    out_dim: int = 512
    mlp_ratio: int = 4
    in_chans: int = 3
    frames: Optional[int] = None
    tubelet: int = 2
    temporal_window: int = 2
    clamp_window: bool = True
    shift_mask: bool = False

    def __post_init__(self):
        if isinstance(self.img_size, int):
            self.img_size = (self.img_size, self.img_size)
        self.img_size = tuple(int(s) for s in self.img_size)
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly 4 entries (one per stage)")
        if any(d < 1 for d in self.depths):
            raise ConfigError("every stage needs at least one block")
        if self.mixer not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer {self.mixer!r}")

    @property
    def video(self) -> bool:
        return self.frames is not None

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2 ** i for i in range(4)]

    def stage_heads(self) -> list[int]:
        """Requested heads reduced (by gcd) so they divide each stage's channels."""
        return [math.gcd(h, c) for h, c in zip(self.heads, self.stage_dims())]

    def patch_grid(self) -> tuple[int, ...]:
        h, w = self.img_size
        p = self.patch_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
        if self.video:
            if self.frames % self.tubelet:
                raise ConfigError(f"clip length {self.frames} is not divisible by tubelet {self.tubelet}")
            return (self.frames // self.tubelet, h // p, w // p)
        return (h // p, w // p)

    def stage_grids(self) -> list[tuple[int, ...]]:
        grids = [self.patch_grid()]
        for i in range(1, 4):
            prev = grids[-1]
            if prev[-1] % 2 or prev[-2] % 2:
                raise ConfigError(f"stage {i}: patch merging needs an even grid, got {prev}")
            grids.append(prev[:-2] + (prev[-2] // 2, prev[-1] // 2))
        return grids

    def requested_window(self) -> tuple[int, ...]:
        if self.video:
            return (self.temporal_window, self.window, self.window)
        return (self.window, self.window)

    def stage_windows(self) -> list[tuple[int, ...]]:
        """Effective window per stage; raises naming the first stage that fails."""
        out = []
        req = self.requested_window()
        for i, grid in enumerate(self.stage_grids()):
            if self.mixer == "global_msa":
                out.append(grid)
                continue
            win = tuple(min(w, g) for w, g in zip(req, grid)) if self.clamp_window else req
            if any(g % w for g, w in zip(grid, win)):
                raise ConfigError(f"stage {i}: grid {grid} is not divisible by window {win}")
            out.append(win)
        return out

    def validate(self) -> None:
        self.stage_windows()
        for i, (h, c) in enumerate(zip(self.stage_heads(), self.stage_dims())):
            if c % h:
                raise ConfigError(f"stage {i}: {h} heads do not divide {c} channels")

    def memory_len(self) -> int:
        return math.prod(self.stage_grids()[-1])


def shift_offsets(window: Sequence[int], grid: Sequence[int]) -> tuple[int, ...]:
    """Half-window shift per axis; axes whose window is a single token do not move."""
    return tuple(w // 2 if w > 1 else 0 for w, g in zip(window, grid))


def shifted_window_mask(grid: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> np.ndarray:
    """``[nW, S, S]`` boolean mask blocking pairs that came from different regions after the shift."""
    labels = np.zeros(tuple(grid), dtype=np.int64)
    for axis, (g, w, s) in enumerate(zip(grid, window, shift)):
        axis_lab = np.zeros(g, dtype=np.int64)
        if s:
            axis_lab[g - w:g - s] = 1
            axis_lab[g - s:] = 2
        shape = [1] * len(grid)
        shape[axis] = g
        labels = labels * 3 + axis_lab.reshape(shape)
    lab = FeatureGrid(Tensor(labels.reshape(1, -1, 1).astype(np.float64)), grid)
    wins = window_partition(lab, window).data[..., 0]
    return wins[:, :, None] != wins[:, None, :]


class SwinBlock(Module):
    """Pre-LN block: windowed token mixing then a ``C -> 4C -> C`` GELU MLP, each residual."""

    def __init__(self, dim: int, heads: int, grid: tuple[int, ...], window: tuple[int, ...],
                 shifted: bool, mixer: str, rng: np.random.Generator, mlp_ratio: int = 4,
                 shift_mask: bool = False):
        self.dim = dim
        self.grid = grid
        self.window = window
        self.shifted = shifted
        self.kind = mixer
        self.shift = shift_offsets(window, grid) if shifted else (0,) * len(grid)
        self.norm1 = LayerNorm(dim)
        self.mixer = build_mixer(mixer, dim, heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio * dim, rng)
        self._mask = None
        if shift_mask and any(self.shift) and isinstance(self.mixer, WindowAttention):
            self._mask = shifted_window_mask(grid, window, self.shift)[:, None]

    def mix(self, g: FeatureGrid) -> FeatureGrid:
        """Token-mixing branch only (no residual)."""
        shifted = cyclic_shift(g, [-s for s in self.shift]) if any(self.shift) else g
        wins = window_partition(shifted, self.window)
        if self._mask is not None:
            mask = np.tile(self._mask, (g.batch, 1, 1, 1))
            wins = self.mixer(wins, mask=mask)
        else:
            wins = self.mixer(wins)
        out = window_reverse(wins, self.grid, self.window, batch=g.batch)
        return cyclic_shift(out, self.shift) if any(self.shift) else out

    def forward(self, g: FeatureGrid) -> FeatureGrid:
        if g.grid != self.grid or g.C != self.dim:
            raise ShapeError(f"block built for grid {self.grid} x {self.dim}, got {g.grid} x {g.C}")
        x = g.tokens
        with mac_scope("mixer"):
            mixed = self.mix(FeatureGrid(self.norm1(x), self.grid))
        x = x + mixed.tokens
        with mac_scope("mlp"):
            x = x + self.mlp(self.norm2(x))
        return FeatureGrid(x, self.grid)


class Stage(Module):
    """Optional patch merging followed by alternating regular / shifted blocks."""

    def __init__(self, index: int, cfg: EncoderConfig, rng: np.random.Generator):
        dims = cfg.stage_dims()
        grid = cfg.stage_grids()[index]
        window = cfg.stage_windows()[index]
        heads = cfg.stage_heads()[index]
        self.index = index
        self.merge = PatchMerging(dims[index - 1], rng) if index > 0 else None
        self.blocks = [
            SwinBlock(dims[index], heads, grid, window, shifted=bool(j % 2), mixer=cfg.mixer,
                      rng=rng, mlp_ratio=cfg.mlp_ratio, shift_mask=cfg.shift_mask)
            for j in range(cfg.depths[index])
        ]

    def forward(self, g: FeatureGrid) -> FeatureGrid:
        if self.merge is not None:
            with mac_scope("merge"):
                g = self.merge(g)
        for j, block in enumerate(self.blocks):
            with mac_scope(f"block{j}"):
                g = block(g)
        return g


class SwinEncoder(Module):
    """Patch embedding, four stages and a final linear to ``out_dim``; no class token."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        spec = PatchSpec(p=cfg.patch_size, C=cfg.embed_dim, t=cfg.tubelet, in_chans=cfg.in_chans)
        self.patch_embed = PatchEmbed(spec, rng, video=cfg.video)
        self.stages = [Stage(i, cfg, rng) for i in range(4)]
        self.head = Linear(cfg.stage_dims()[-1], cfg.out_dim, rng)

    def check_input(self, x) -> None:
        want = (self.cfg.in_chans,)
        if self.cfg.video:
            want += (self.cfg.frames,)
        want += self.cfg.img_size
        if tuple(x.shape[1:]) != want:
            raise ShapeError(f"encoder expects input [B, {', '.join(map(str, want))}], got {tuple(x.shape)}")

    def forward_stages(self, x) -> list[FeatureGrid]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        with mac_scope("patch_embed"):
            g = self.patch_embed(x)
        outs = []
        for i, stage in enumerate(self.stages):
            with mac_scope(f"stage{i}"):
                g = stage(g)
            outs.append(g)
        return outs

    def forward(self, x) -> Tensor:
        """``[B, 3, H, W]`` (or ``[B, 3, T, H, W]``) -> memory ``[B, L, out_dim]``."""
        g = self.forward_stages(x)[-1]
        with mac_scope("head"):
            return self.head(g.tokens)


def encode_image(image, encoder: SwinEncoder) -> Tensor:
    """Single image ``[3, H, W]`` -> memory ``[L, out_dim]``."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    out = encoder(x.reshape((1,) + x.shape))
    return out.reshape(out.shape[1:])


def encode_video(clip, encoder: SwinEncoder) -> Tensor:
    """Single clip ``[3, T, H, W]`` -> memory ``[L, out_dim]``."""
    if not encoder.cfg.video:
        raise ConfigError("encoder was not configured for video (frames is unset)")
    return encode_image(clip, encoder)
