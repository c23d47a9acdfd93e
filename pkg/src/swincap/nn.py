"""Minimal module containers and the parameterised layers shared by the models."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(DEFAULT_DTYPE)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (64-bit mode is for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (out_dim, in_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias, self.eps)


class FeedForward(Module):
    """Two-layer MLP ``dim -> hidden -> dim`` (GELU by default)."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, activation: str = "gelu"):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        act = ops.gelu if self.activation == "gelu" else ops.relu
        return self.fc2(act(self.fc1(x)))
