"""Differentiable operations on :class:`~swincap.tensor.Tensor`.

Only the broadcasting the model needs is supported: elementwise ops follow
numpy rules and reduce gradients back to the operand shape.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import MAC_COUNTER, Tensor, as_tensor

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(ValueError):
    """A structural hyperparameter violates a divisibility or range rule."""


class UndefinedLossError(ValueError):
    """Every target position was ignored, so the mean loss has no terms."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return Tensor._from_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + GELU_COEF * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)
    MAC_COUNTER.add_elementwise(xd.size)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xd ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._from_op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic shift: ``out[i] = x[(i - shift) mod n]`` along each axis."""
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return x
    out = np.roll(x.data, shifts, axes)
    neg = tuple(-s for s in shifts)
    return Tensor._from_op(out, (x,), lambda g: (np.roll(g, neg, axes),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(xs), backward)


# -- products -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    MAC_COUNTER.add(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._from_op(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    MAC_COUNTER.add(x2.shape[0] * weight.shape[0] * weight.shape[1])
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def grouped_spatial_mix(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-head token mixing inside windows.

    ``x`` is ``[W, S, C]``, ``weights`` ``[n, S, S]``, ``bias`` ``[n, S]``. Head
    ``i`` owns channels ``i*C/n:(i+1)*C/n`` and computes
    ``out[w, j, c] = sum_k weights[i, j, k] * x[w, k, c] + bias[i, j]``.
    This is a kernel-size-1 grouped convolution over the ``n*S`` axis.
    """
    if x.ndim != 3:
        raise ShapeError(f"grouped_spatial_mix expects [W, S, C], got {x.shape}")
    nw, s, c = x.shape
    n = weights.shape[0]
    if c % n:
        raise ConfigError(f"head count {n} does not divide channel dim {c}")
    if weights.shape != (n, s, s) or bias.shape != (n, s):
        raise ShapeError(f"weights {weights.shape} / bias {bias.shape} do not fit {n} heads of {s} tokens")
    d = c // n
    xh = x.data.reshape(nw, s, n, d).transpose(0, 2, 1, 3)  # [W, n, S, d]
    mixed = np.matmul(weights.data, xh) + bias.data[:, :, None]
    MAC_COUNTER.add(nw * n * s * s * d)
    out = np.ascontiguousarray(mixed.transpose(0, 2, 1, 3)).reshape(nw, s, c)

    def backward(g):
        gh = g.reshape(nw, s, n, d).transpose(0, 2, 1, 3)
        gx = None
        if x.requires_grad:
            gx = np.matmul(np.swapaxes(weights.data, -1, -2), gh)
            gx = np.ascontiguousarray(gx.transpose(0, 2, 1, 3)).reshape(nw, s, c)
        gw = np.einsum("wnjd,wnkd->njk", gh, xh, optimize=True) if weights.requires_grad else None
        gb = gh.sum(axis=(0, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._from_op(out, (x, weights, bias), backward)


# -- normalisation / probabilities -------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} do not match channel dim {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    MAC_COUNTER.add_elementwise(xd.size // c)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable bool) marks blocked entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    MAC_COUNTER.add_elementwise(p.size // p.shape[axis])

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p.astype(x.dtype, copy=False), (x,), backward)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_id: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_id``.

    ``logits`` is ``[..., V]`` and ``targets`` an integer array of the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = np.ones_like(t, dtype=bool) if ignore_id is None else t != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise UndefinedLossError("cross_entropy: every target equals ignore_id")
    if np.any((t[keep] < 0) | (t[keep] >= v)):
        raise ShapeError(f"target ids must lie in [0, {v})")
    rows = np.nonzero(keep)[0]
    logp = log_softmax_np(z[rows])
    picked = logp[np.arange(count), t[rows]]
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.zeros_like(z)
        p = np.exp(logp)
        p[np.arange(count), t[rows]] -= 1.0
        grad[rows] = p * (g / count)
        return (grad.reshape(logits.shape),)

    return Tensor._from_op(loss, (logits,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for vocabulary of {weight.shape[0]}")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return Tensor._from_op(out, (weight,), backward)
