"""Encoder-decoder captioner: window encoder memory feeding the caption decoder."""
from __future__ import annotations

import numpy as np

from . import ops
from .config import RunConfig
from .decoder import BOS, EOS, PAD, CaptionDecoder, greedy_decode
from .encoder import SwinEncoder
from .nn import Module
from .tensor import Tensor, mac_scope, no_grad


class CaptionModel(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.run_cfg = cfg
        self.encoder = SwinEncoder(cfg.encoder_config(), rng)
        self.decoder = CaptionDecoder(cfg.decoder_config(vocab_size), rng)

    def encode(self, images) -> Tensor:
        with mac_scope("encoder"):
            return self.encoder(images)

    def forward(self, images, prev_ids) -> Tensor:
        memory = self.encode(images)
        with mac_scope("decoder"):
            return self.decoder(memory, prev_ids)

    def loss(self, images, captions: list[list[int]]) -> Tensor:
        """Teacher-forced next-token cross-entropy; padding is ignored."""
        inputs, targets = teacher_forcing_batch(captions, self.decoder.cfg.max_len)
        logits = self.forward(images, inputs)
        return ops.cross_entropy(logits, targets, ignore_id=PAD)

    def generate(self, images, max_len: int | None = None) -> list[list[int]]:
        with no_grad():
            memory = self.encoder(images)
            return greedy_decode(memory, self.decoder, max_len)


def teacher_forcing_batch(captions: list[list[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``[BOS] + caption`` and targets ``caption + [EOS]``, padded to the batch max.

    Captions longer than ``max_len - 1`` tokens are truncated (EOS is kept).
    """
    trimmed = [list(c)[: max_len - 1] for c in captions]
    length = max(len(c) for c in trimmed) + 1
    inputs = np.full((len(trimmed), length), PAD, dtype=np.int64)
    targets = np.full((len(trimmed), length), PAD, dtype=np.int64)
    for i, cap in enumerate(trimmed):
        inputs[i, : len(cap) + 1] = [BOS] + cap
        targets[i, : len(cap) + 1] = cap + [EOS]
    return inputs, targets
