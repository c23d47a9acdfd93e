"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .ops import ConfigError


def check_images(X, video: Optional[bool] = None) -> np.ndarray:
    """Return ``X`` as float32 ``[n, 3, H, W]`` (or ``[n, 3, T, H, W]`` for clips).

    ``uint8`` input is rescaled to [0, 1]. ``video`` forces the expected rank.
    """
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    ranks = {True: (5,), False: (4,), None: (4, 5)}[video]
    if arr.ndim not in ranks:
        raise ValueError(f"expected images of rank {' or '.join(map(str, ranks))} "
                         f"([n, 3, H, W] or [n, 3, T, H, W]), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if arr.shape[-1] != arr.shape[-2]:
        raise ConfigError(f"images must be square, got {arr.shape[-2]}x{arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    return arr


def check_captions(y, n: int) -> list[str]:
    if isinstance(y, str):
        raise ValueError("captions must be a sequence of strings, not a single string")
    caps = [str(c) for c in y]
    if len(caps) != n:
        raise ValueError(f"{n} images but {len(caps)} captions")
    return caps


def check_references(y, n: int) -> list[list[str]]:
    """Accept one caption or a list of reference captions per sample."""
    out = []
    for refs in y:
        out.append([refs] if isinstance(refs, str) else [str(r) for r in refs])
    if len(out) != n:
        raise ValueError(f"{n} images but {len(out)} reference sets")
    return out


def check_divisible(size: int, patch: int, constraint: Sequence[int] = (8,)) -> None:
    """Image side must be divisible by ``patch * 2^3`` so all merges see even grids."""
    need = patch * int(np.prod(constraint))
    if size % need:
        raise ConfigError(f"image size {size} must be divisible by patch*2^3 = {need}")
