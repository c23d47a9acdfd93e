"""Teacher-forced training loop, logging and checkpoint persistence."""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig
from .model import CaptionModel
from .optim import Adam
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch", "lr", "loss")


class DivergenceError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainResult:
    model: CaptionModel
    vocab: Vocabulary
    optimizer: Adam
    log: list[tuple[int, int, float, float]] = field(default_factory=list)
    epochs_done: int = 0


def build_model(cfg: RunConfig, vocab: Vocabulary) -> CaptionModel:
    return CaptionModel(cfg, len(vocab), np.random.default_rng(cfg.seed))


def state_with_optimizer(model: CaptionModel, opt: Adam, epoch: int) -> "OrderedDict[str, np.ndarray]":
    state = OrderedDict(model.state_dict())
    for (name, _), m, v in zip(model.named_parameters(), opt.m, opt.v):
        state[f"optim.m.{name}"] = m
        state[f"optim.v.{name}"] = v
    state["optim.step"] = np.array(opt.step_count, dtype=np.float32)
    state["train.epoch"] = np.array(epoch, dtype=np.float32)
    return state


def save_checkpoint(path, model: CaptionModel, opt: Optional[Adam], vocab: Vocabulary, epoch: int = 0) -> None:
    state = state_with_optimizer(model, opt, epoch) if opt is not None else model.state_dict()
    checkpoint.save(path, state, vocab, model.run_cfg)


def load_checkpoint(path, cfg: Optional[RunConfig] = None):
    """Rebuild ``(model, vocab, cfg, optimizer, epoch)`` from a checkpoint file."""
    tensors, vocab, text = checkpoint.load(path)
    saved_cfg = RunConfig.from_text(text)
    cfg = cfg or saved_cfg
    model = build_model(cfg, vocab)
    names = [n for n, _ in model.named_parameters()]
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("optim.", "train."))})
    opt = Adam(model.parameters(), cfg.lr, cfg.warmup)
    epoch = 0
    if "optim.step" in tensors:
        opt.step_count = int(tensors["optim.step"])
        opt.m = [tensors[f"optim.m.{n}"].copy() for n in names]
        opt.v = [tensors[f"optim.v.{n}"].copy() for n in names]
        epoch = int(tensors["train.epoch"])
    return model, vocab, cfg, opt, epoch


def batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order depends only on (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch, 1]).permutation(n)
    return [perm[i: i + batch] for i in range(0, n, batch)]


def train(cfg: RunConfig, images: np.ndarray, captions: Sequence[str], out_dir=None,
          vocab: Optional[Vocabulary] = None, resume=None, epochs: Optional[int] = None,
          max_steps: Optional[int] = None, callback=None) -> TrainResult:
    """Fit a captioner on ``images`` (``[N, 3, H, W]`` or ``[N, 3, T, H, W]``).

    Writes ``train_log.csv``, ``last.ckpt`` (every epoch) and ``best.ckpt``
    (lowest epoch-mean loss) under ``out_dir`` when given. ``callback(step,
    model)`` runs after every optimiser step; returning True stops training.
    """
    if len(captions) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images but {len(captions)} captions")
    epochs = cfg.epochs if epochs is None else epochs
    max_steps = cfg.max_steps if max_steps is None else max_steps
    start_epoch = 0
    if resume is not None:
        model, vocab, _, opt, start_epoch = load_checkpoint(resume, cfg)
    else:
        vocab = vocab or Vocabulary.build(captions)
        model = build_model(cfg, vocab)
        opt = Adam(model.parameters(), cfg.lr, cfg.warmup)
    encoded = [vocab.encode(c) for c in captions]
    images = np.asarray(images, dtype=np.float32)

    out = Path(out_dir) if out_dir is not None else None
    log_rows: list[tuple[int, int, float, float]] = []
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        append = resume is not None and log_path.exists()
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(LOG_HEADER)

    best = math.inf
    epoch = start_epoch
    stop = False
    try:
        for epoch in range(start_epoch, epochs):
            losses = []
            for idx in batches(len(encoded), cfg.batch, cfg.seed, epoch):
                loss = model.loss(images[idx], [encoded[i] for i in idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"loss is {value} at step {opt.step_count + 1} (epoch {epoch})")
                loss.backward()
                lr = opt.step()
                opt.zero_grad()
                row = (opt.step_count, epoch, lr, value)
                log_rows.append(row)
                losses.append(value)
                if writer is not None:
                    writer.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
                if callback is not None and callback(opt.step_count, model):
                    stop = True
                if max_steps and opt.step_count >= max_steps:
                    stop = True
                if stop:
                    break
            epoch_loss = float(np.mean(losses))
            logger.info("epoch %d: mean loss %.4f (step %d)", epoch, epoch_loss, opt.step_count)
            if out is not None:
                fh.flush()
                save_checkpoint(out / "last.ckpt", model, opt, vocab, epoch + 1)
                if epoch_loss < best:
                    best = epoch_loss
                    save_checkpoint(out / "best.ckpt", model, opt, vocab, epoch + 1)
            if stop:
                break
    finally:
        if fh is not None:
            fh.close()
    done = epoch + 1 if log_rows else start_epoch
    return TrainResult(model, vocab, opt, log_rows, done)
