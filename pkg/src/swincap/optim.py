"""Adam with bias correction driven by a linear-warmup / inverse-sqrt schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .ops import ShapeError
from .tensor import Tensor


def lr_schedule(step: int, base_lr: float = 3e-4, warmup: int = 20000) -> float:
    """``base_lr * min(step / warmup, sqrt(warmup / step))``; peaks at ``step == warmup``."""
    if step < 1:
        raise ValueError("lr_schedule is defined for step >= 1")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Sequence[Tensor], base_lr: float = 3e-4, warmup: int = 20000,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.params = list(params)
        self.base_lr = base_lr
        self.warmup = warmup
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        """Learning rate the next :meth:`step` will use."""
        return lr_schedule(self.step_count + 1, self.base_lr, self.warmup)

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> float:
        """Apply one update (from ``p.grad`` unless ``grads`` is given); returns the lr used."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        lr = lr_schedule(t, self.base_lr, self.warmup)
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> float:
    return state.step(grads)
