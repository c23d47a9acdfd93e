"""Token mixers: window spatial MLP, window attention, global attention, pooling.

Every mixer maps ``[nW, S, C] -> [nW, S, C]`` where ``S`` is the number of tokens
per window (the whole sequence for global attention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import Linear, Module, parameter, trunc_normal
from .ops import ConfigError, ShapeError
from .tensor import Tensor

MIXER_KINDS = ("w_mlp", "w_msa", "global_msa", "pool")


@dataclass(frozen=True)
class MixerConfig:
    kind: str
    heads: int
    window: int = 7
    pool_size: int = 3

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer kind {self.kind!r}; expected one of {MIXER_KINDS}")
        if self.heads < 1:
            raise ConfigError("heads must be positive")

    def head_dim(self, channels: int) -> int:
        if channels % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide {channels} channels")
        return channels // self.heads


def w_mlp_mix(wins: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Window multi-head spatial MLP; a thin alias of the grouped mixing kernel."""
    return ops.grouped_spatial_mix(wins, weights, bias)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: Optional[np.ndarray] = None, return_probs: bool = False):
    """Scaled dot-product attention over ``[B, Lq, C]`` / ``[B, Lk, C]`` inputs.

    ``mask`` is a boolean array broadcastable to ``[B, heads, Lq, Lk]``; True
    entries are blocked. Returns ``[B, Lq, C]`` (and the probabilities on request).
    """
    b, lq, c = q.shape
    lk = k.shape[1]
    if c % heads:
        raise ConfigError(f"{heads} heads do not divide {c} channels")
    d = c // heads
    qh = q.reshape(b, lq, heads, d).transpose(0, 2, 1, 3)
    kt = k.reshape(b, lk, heads, d).transpose(0, 2, 3, 1)
    vh = v.reshape(b, lk, heads, d).transpose(0, 2, 1, 3)
    scores = ops.matmul(qh, kt) * (1.0 / math.sqrt(d))
    probs = ops.softmax(scores, axis=-1, mask=mask)
    out = ops.matmul(probs, vh).transpose(0, 2, 1, 3).reshape(b, lq, c)
    return (out, probs) if return_probs else out


class WindowMLP(Module):
    """Per-head ``S x S`` position mixing inside each window (W-MLP / SW-MLP)."""

    def __init__(self, dim: int, heads: int, tokens: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide {dim} channels")
        self.heads = heads
        self.tokens = tokens
        self.weight = parameter(trunc_normal(rng, (heads, tokens, tokens)))
        self.bias = parameter(np.zeros((heads, tokens)))

    def forward(self, wins: Tensor) -> Tensor:
        if wins.shape[1] != self.tokens:
            raise ShapeError(f"W-MLP built for {self.tokens} tokens per window, got {wins.shape[1]}")
        return w_mlp_mix(wins, self.weight, self.bias)


class WindowAttention(Module):
    """Multi-head self-attention inside each window; also used for the global case.

    Q, K, V and the output projection are ``C x C`` linears. No relative
    position bias is applied.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide {dim} channels")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, wins: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        out = multi_head_attention(self.q(wins), self.k(wins), self.v(wins), self.heads, mask=mask)
        return self.proj(out)

    def attention_probs(self, wins: Tensor) -> np.ndarray:
        _, probs = multi_head_attention(self.q(wins), self.k(wins), self.v(wins), self.heads,
                                        return_probs=True)
        return probs.data


def w_msa(wins: Tensor, attn: WindowAttention, mask: Optional[np.ndarray] = None) -> Tensor:
    return attn(wins, mask=mask)


def global_msa(tokens: Tensor, attn: WindowAttention) -> Tensor:
    """Full-sequence attention; ``tokens`` is ``[N, C]`` or ``[B, N, C]``."""
    squeeze = tokens.ndim == 2
    x = tokens.reshape((1,) + tokens.shape) if squeeze else tokens
    out = attn(x)
    return out.reshape(out.shape[1:]) if squeeze else out


class WindowPool(Module):
    """Mean over a ``k x k`` neighbourhood minus the token itself, within a window.

    Neighbourhoods are truncated at window borders (average over valid
    neighbours only).
    """

    def __init__(self, window: tuple[int, ...], pool_size: int = 3):
        if pool_size % 2 == 0:
            raise ConfigError("pool_size must be odd")
        self.window = window
        self.pool_size = pool_size
        self._matrix = _pool_matrix(window, pool_size)

    def forward(self, wins: Tensor) -> Tensor:
        mixer = Tensor(self._matrix.astype(wins.dtype))
        return ops.matmul(mixer, wins)


def _pool_matrix(window: tuple[int, ...], k: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij"), -1).reshape(-1, len(window))
    r = k // 2
    near = np.all(np.abs(coords[:, None, :] - coords[None, :, :]) <= r, axis=-1).astype(np.float64)
    avg = near / near.sum(axis=1, keepdims=True)
    return avg - np.eye(len(coords))


def pool_mix(wins: Tensor, window: tuple[int, ...], k: int = 3) -> Tensor:
    if k % 2 == 0:
        raise ConfigError("pool_size must be odd")
    return WindowPool(tuple(window), k)(wins)


def build_mixer(kind: str, dim: int, heads: int, window: tuple[int, ...], rng: np.random.Generator,
                pool_size: int = 3) -> Module:
    tokens = math.prod(window)
    if kind == "w_mlp":
        return WindowMLP(dim, heads, tokens, rng)
    if kind in ("w_msa", "global_msa"):
        return WindowAttention(dim, heads, rng)
    if kind == "pool":
        return WindowPool(window, pool_size)
    raise ConfigError(f"unknown mixer kind {kind!r}")


def mixer_params(kind: str, dim: int, heads: int, tokens: int) -> int:
    """Closed-form parameter count of one mixer."""
    if kind == "w_mlp":
        return heads * tokens * (tokens + 1)
    if kind in ("w_msa", "global_msa"):
        return 4 * (dim * dim + dim)
    return 0
