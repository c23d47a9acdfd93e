"""scikit-learn compatible captioner wrapping the encoder-decoder model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_captions, check_images, check_references
from .config import RunConfig
from .metrics import EvalRecord, bleu4
from .tensor import no_grad
from .train import load_checkpoint, save_checkpoint, train


class SwinCaptioner(BaseEstimator):
    """Caption images (or clips) with a window MLP / attention encoder and a transformer decoder.

    Defaults follow the reference L configuration (C=128, depths 2-2-18-2,
    window 14, 6-block 512-d decoder, batch 9, Adam at 3e-4 with 20000
    warm-up steps); shrink them for CPU-scale work. Image side and clip
    length are taken from ``X`` at fit time.

    Parameters
    ----------
    model : {"swinmlp", "swin", "video-swinmlp"}
        ``swinmlp`` mixes tokens with per-head spatial MLPs, ``swin`` with
        window self-attention; ``video-swinmlp`` takes ``[n, 3, T, H, W]`` clips.
    max_steps : int
        Stop after this many optimiser steps (0 = run all ``epochs``).
    """

    def __init__(self, model="swinmlp", patch=4, embed_dim=128, window=14, depths=(2, 2, 18, 2),
                 heads=(4, 8, 16, 32), tubelet=2, temporal_window=2, dec_blocks=6, dec_dim=512,
                 dec_heads=8, dec_ffn=2048, max_len=24, batch=9, lr=3e-4, warmup=20000, epochs=100,
                 max_steps=0, seed=0):
        self.model = model
        self.patch = patch
        self.embed_dim = embed_dim
        self.window = window
        self.depths = depths
        self.heads = heads
        self.tubelet = tubelet
        self.temporal_window = temporal_window
        self.dec_blocks = dec_blocks
        self.dec_dim = dec_dim
        self.dec_heads = dec_heads
        self.dec_ffn = dec_ffn
        self.max_len = max_len
        self.batch = batch
        self.lr = lr
        self.warmup = warmup
        self.epochs = epochs
        self.max_steps = max_steps
        self.seed = seed

    def _run_config(self, X: np.ndarray) -> RunConfig:
        video = self.model == "video-swinmlp"
        return RunConfig(
            model=self.model, image_size=X.shape[-1], patch=self.patch, embed_dim=self.embed_dim,
            window=self.window, depths=tuple(self.depths), heads=tuple(self.heads),
            frames=X.shape[2] if video else 4, tubelet=self.tubelet,
            temporal_window=self.temporal_window, dec_blocks=self.dec_blocks, dec_dim=self.dec_dim,
            dec_heads=self.dec_heads, dec_ffn=self.dec_ffn, max_len=self.max_len, seed=self.seed,
            epochs=self.epochs, batch=self.batch, lr=self.lr, warmup=self.warmup,
            max_steps=self.max_steps,
        )

    def fit(self, X, y, callback=None):
        X = check_images(X, video=self.model == "video-swinmlp")
        y = check_captions(y, len(X))
        cfg = self._run_config(X)
        result = train(cfg, X, y, callback=callback)
        self.config_ = cfg
        self.model_ = result.model
        self.vocab_ = result.vocab
        self.optimizer_ = result.optimizer
        self.log_ = result.log
        self.n_steps_ = result.optimizer.step_count
        return self

    def predict(self, X, batch_size: int = 32) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, video=self.config_.video)
        out = []
        for i in range(0, len(X), batch_size):
            ids = self.model_.generate(X[i: i + batch_size])
            out.extend(self.vocab_.decode(s) for s in ids)
        return np.array(out, dtype=object)

    def transform(self, X, batch_size: int = 32) -> np.ndarray:
        """Encoder memory flattened to ``[n, L * dec_dim]`` features."""
        check_is_fitted(self, "model_")
        X = check_images(X, video=self.config_.video)
        feats = []
        with no_grad():
            for i in range(0, len(X), batch_size):
                mem = self.model_.encode(X[i: i + batch_size]).data
                feats.append(mem.reshape(mem.shape[0], -1))
        return np.concatenate(feats)

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the predicted captions against ``y``."""
        preds = self.predict(X)
        refs = check_references(y, len(preds))
        return bleu4([EvalRecord(p, r) for p, r in zip(preds, refs)])

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.optimizer_, self.vocab_)

    @classmethod
    def load(cls, path) -> "SwinCaptioner":
        model, vocab, cfg, opt, _ = load_checkpoint(path)
        est = cls(model=cfg.model, patch=cfg.patch, embed_dim=cfg.embed_dim, window=cfg.window,
                  depths=cfg.depths, heads=cfg.heads, tubelet=cfg.tubelet,
                  temporal_window=cfg.temporal_window, dec_blocks=cfg.dec_blocks, dec_dim=cfg.dec_dim,
                  dec_heads=cfg.dec_heads, dec_ffn=cfg.dec_ffn, max_len=cfg.max_len, batch=cfg.batch,
                  lr=cfg.lr, warmup=cfg.warmup, epochs=cfg.epochs, max_steps=cfg.max_steps, seed=cfg.seed)
        est.config_, est.model_, est.vocab_, est.optimizer_ = cfg, model, vocab, opt
        est.log_ = []
        est.n_steps_ = opt.step_count
        return est
