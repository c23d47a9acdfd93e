"""Central-difference gradient checking in float64."""
from __future__ import annotations

import numpy as np


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exactly-zero gradients
    (e.g. the key bias under softmax shift invariance) from dividing noise by noise."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn, params, rng, samples: int = 6, eps: float = 1e-4) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn()`` rebuilds the scalar loss from the current ``params``; up to
    ``samples`` entries of each parameter are perturbed.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        num = np.empty(len(picks))
        for j, k in enumerate(picks):
            old = flat[k]
            flat[k] = old + eps
            up = loss_fn().item()
            flat[k] = old - eps
            down = loss_fn().item()
            flat[k] = old
            num[j] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(grad.reshape(-1)[picks], num))
    return worst


def randomize(module, rng, scale: float = 0.3):
    """Replace every parameter with O(scale) float64 noise so gradients are not vanishingly small."""
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, p.shape)
    return module
