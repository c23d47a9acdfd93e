"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SWCAP1\\0"                      7-byte magic
    u32 version, u32 tensor_count
    per tensor: u32 name_len, utf-8 name, u32 rank, rank x u64 dims, float32 data
    vocabulary: u32 word_count, per word u32 len + utf-8
    config:     u32 byte_len, utf-8 key=value text
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import RunConfig
from .vocab import SPECIALS, Vocabulary

MAGIC = b"SWCAP1\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: "OrderedDict[str, np.ndarray]", vocab: Vocabulary, config_text: str) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    words = vocab.itos[len(SPECIALS):]
    buf.write(struct.pack("<I", len(words)))
    for w in words:
        raw = w.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    raw = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)) + raw)
    return buf.getvalue()


def loads(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", Vocabulary, str]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    view = memoryview(blob)
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[pos: pos + n])
        pos += n
        return out

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        name = take_bytes(nlen).decode("utf-8")
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take_bytes(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = data
    (nwords,) = take("<I")
    words = []
    for _ in range(nwords):
        (wlen,) = take("<I")
        words.append(take_bytes(wlen).decode("utf-8"))
    (clen,) = take("<I")
    config_text = take_bytes(clen).decode("utf-8")
    return tensors, Vocabulary(words), config_text


def save(path, tensors, vocab: Vocabulary, config: RunConfig | str) -> None:
    text = config if isinstance(config, str) else config.to_text()
    Path(path).write_bytes(dumps(tensors, vocab, text))


def load(path) -> tuple["OrderedDict[str, np.ndarray]", Vocabulary, str]:
    return loads(Path(path).read_bytes())
