"""Transformer caption decoder with causal self-attention and memory cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .mixers import multi_head_attention
from .nn import FeedForward, LayerNorm, Linear, Module, parameter, trunc_normal
from .ops import ConfigError, ShapeError
from .tensor import Tensor, mac_scope, no_grad

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class DecoderConfig:
    vocab_size: int
    blocks: int = 6
    model_dim: int = 512
    heads: int = 8
    ffn_dim: int = 2048
    max_len: int = 32

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide model_dim {self.model_dim}")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.vocab_size <= UNK:
            raise ConfigError("vocabulary must hold the four reserved specials")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: position i may not look at j > i."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, context: Tensor, mask=None, return_probs: bool = False):
        out = multi_head_attention(self.q(x), self.k(context), self.v(context), self.heads,
                                   mask=mask, return_probs=return_probs)
        if return_probs:
            return self.proj(out[0]), out[1]
        return self.proj(out)


class DecoderBlock(Module):
    """Pre-LN: masked self-attention, cross-attention over memory, FFN; all residual."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = Attention(d, cfg.heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, activation="relu")

    def forward(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        with mac_scope("self_attn"):
            h = self.norm1(x)
            x = x + self.self_attn(h, h, mask=mask)
        with mac_scope("cross_attn"):
            x = x + self.cross_attn(self.norm2(x), memory)
        with mac_scope("ffn"):
            x = x + self.ffn(self.norm3(x))
        return x


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = parameter(trunc_normal(rng, (cfg.vocab_size, cfg.model_dim)))
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.norm = LayerNorm(cfg.model_dim)
        self.out = Linear(cfg.model_dim, cfg.vocab_size, rng)
        self._pe = sinusoidal_positions(cfg.max_len, cfg.model_dim)

    def forward(self, memory: Tensor, prev_ids) -> Tensor:
        """``memory [B, L, d]`` and ids ``[B, len]`` -> logits ``[B, len, V]``."""
        ids = np.asarray(prev_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"prev_ids must be [B, len], got {ids.shape}")
        length = ids.shape[1]
        if length > self.cfg.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        if memory.shape[-1] != self.cfg.model_dim or memory.shape[0] != ids.shape[0]:
            raise ShapeError(f"memory {memory.shape} does not match batch {ids.shape[0]} x dim {self.cfg.model_dim}")
        scale = math.sqrt(self.cfg.model_dim)
        x = ops.embedding(self.embed, ids) * scale
        x = x + Tensor(self._pe[:length].astype(x.dtype))
        mask = causal_mask(length)
        for i, block in enumerate(self.blocks):
            with mac_scope(f"block{i}"):
                x = block(x, memory, mask)
        with mac_scope("out"):
            return self.out(self.norm(x))


def decoder_forward(memory: Tensor, prev_ids, decoder: CaptionDecoder) -> Tensor:
    """Unbatched form: ``memory [L, d]``, ``prev_ids [len]`` -> logits ``[len, V]``."""
    mem = memory.reshape((1,) + memory.shape)
    logits = decoder(mem, np.asarray(prev_ids, dtype=np.int64)[None, :])
    return logits.reshape(logits.shape[1:])


def greedy_decode(memory: Tensor, decoder: CaptionDecoder, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding (ties -> lowest id) for a batch of memories ``[B, L, d]``.

    Each returned sequence excludes BOS/EOS and has at most ``max_len - 1``
    tokens, since BOS occupies the first of ``max_len`` decoder positions.
    """
    limit = decoder.cfg.max_len if max_len is None else min(max_len, decoder.cfg.max_len)
    b = memory.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    with no_grad():
        for _ in range(limit - 1):
            logits = decoder(memory, seqs).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out
