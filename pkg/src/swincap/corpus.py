"""Synthetic shapes corpus: rendered scenes, templated captions, on-disk format.

Each scene places 1-3 coloured primitives in distinct cells of a 3x3 layout.
Objects are listed by (column, row); consecutive objects are joined by
"left of" when the column changes and "above" otherwise, e.g.
``a red circle left of a blue square above a green triangle``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .ops import ConfigError

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 220, 40),
    "white": (240, 240, 240),
    "purple": (160, 60, 200),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("left of", "above")
BACKGROUND = (20, 20, 20)
IMG_MAGIC = b"IMG1"
MANIFEST = "manifest.jsonl"


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    row: int
    col: int


def caption_words() -> set[str]:
    words = {"a"} | set(COLORS) | set(SHAPES)
    for rel in RELATIONS:
        words |= set(rel.split())
    return words


def describe(objects: list[SceneObject]) -> tuple[list[tuple[str, str]], list[str]]:
    """Facts of a scene: ordered (color, shape) pairs and the relation between neighbours."""
    ordered = sorted(objects, key=lambda o: (o.col, o.row))
    items = [(o.color, o.shape) for o in ordered]
    rels = ["left of" if b.col != a.col else "above" for a, b in zip(ordered, ordered[1:])]
    return items, rels


def caption_from_facts(items: list[tuple[str, str]], rels: list[str]) -> str:
    parts = [f"a {items[0][0]} {items[0][1]}"]
    for rel, (color, shape) in zip(rels, items[1:]):
        parts.append(f"{rel} a {color} {shape}")
    return " ".join(parts)


def parse_caption(caption: str) -> tuple[list[tuple[str, str]], list[str]]:
    """Inverse of :func:`caption_from_facts`; raises ``ValueError`` on malformed text."""
    words = caption.split()
    items: list[tuple[str, str]] = []
    rels: list[str] = []
    i = 0
    while True:
        if i + 3 > len(words) or words[i] != "a":
            raise ValueError(f"expected 'a <color> <shape>' at word {i} of {caption!r}")
        color, shape = words[i + 1], words[i + 2]
        if color not in COLORS or shape not in SHAPES:
            raise ValueError(f"unknown object {color!r} {shape!r}")
        items.append((color, shape))
        i += 3
        if i == len(words):
            return items, rels
        if words[i: i + 2] == ["left", "of"]:
            rels.append("left of")
            i += 2
        elif words[i: i + 1] == ["above"]:
            rels.append("above")
            i += 1
        else:
            raise ValueError(f"unknown relation at word {i} of {caption!r}")


def sample_scene(rng: np.random.Generator) -> list[SceneObject]:
    count = int(rng.integers(1, 4))
    cells = rng.choice(9, size=count, replace=False)
    objs = []
    for cell in cells:
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        objs.append(SceneObject(color, shape, int(cell) // 3, int(cell) % 3))
    return objs


def render(objects: list[SceneObject], size: int, offsets: Optional[list[tuple[int, int]]] = None) -> np.ndarray:
    """Rasterise a scene to ``[size, size, 3]`` uint8; ``offsets`` nudge each object by (dy, dx) px."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cell = size / 3.0
    radius = cell * 0.36
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for k, obj in enumerate(objects):
        dy, dx = offsets[k] if offsets else (0, 0)
        cy = (obj.row + 0.5) * cell + dy
        cx = (obj.col + 0.5) * cell + dx
        if obj.shape == "circle":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        elif obj.shape == "square":
            half = radius * 0.85
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        else:
            top, bottom = cy - radius, cy + radius
            frac = (yy - top) / (bottom - top)
            mask = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= frac * radius)
        img[mask] = COLORS[obj.color]
    return img


def render_clip(objects: list[SceneObject], size: int, frames: int, rng: np.random.Generator) -> np.ndarray:
    """``[frames, size, size, 3]`` with each object drifting one pixel per frame."""
    vel = [(int(rng.integers(-1, 2)), int(rng.integers(-1, 2))) for _ in objects]
    start = [(-v[0] * (frames // 2), -v[1] * (frames // 2)) for v in vel]
    out = []
    for f in range(frames):
        offs = [(s[0] + v[0] * f, s[1] + v[1] * f) for s, v in zip(start, vel)]
        out.append(render(objects, size, offs))
    return np.stack(out)


# -- raw image files ----------------------------------------------------------

def write_image(path, pixels: np.ndarray) -> None:
    """Write ``[H, W, 3]`` uint8 as ``IMG1``, u32 H, u32 W (little-endian), RGB bytes."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise ValueError("image must have 3 channels")
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<II", h, w) + pixels.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != IMG_MAGIC:
        raise ValueError(f"{path}: bad image magic")
    h, w = struct.unpack("<II", blob[4:12])
    body = np.frombuffer(blob, dtype=np.uint8, offset=12)
    if body.size != h * w * 3:
        raise ValueError(f"{path}: truncated image ({body.size} of {h * w * 3} bytes)")
    return body.reshape(h, w, 3)


def to_array(pixels: np.ndarray, frames: Optional[int] = None) -> np.ndarray:
    """uint8 ``[H, W, 3]`` -> float32 ``[3, H, W]`` in [0, 1]; stacked clips -> ``[3, T, H/T, W]``."""
    x = pixels.astype(np.float32) / 255.0
    if frames:
        h = x.shape[0] // frames
        return x.reshape(frames, h, x.shape[1], 3).transpose(3, 0, 1, 2).copy()
    return x.transpose(2, 0, 1).copy()


# -- corpus on disk -------------------------------------------------------------

def gen_corpus(out_dir, seed: int, count: int, image_size: int = 64,
               frames: Optional[int] = None) -> Path:
    """Render ``count`` samples under ``out_dir`` and write the JSON-lines manifest.

    Clips are stored as one image with the frames stacked vertically; their
    manifest records carry a ``frames`` field.
    """
    if count < 1:
        raise ConfigError("count must be at least 1")
    if image_size < 12:
        raise ConfigError("image_size must be at least 12 pixels")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        objs = sample_scene(rng)
        items, rels = describe(objs)
        if frames:
            pixels = render_clip(objs, image_size, frames, rng).reshape(frames * image_size, image_size, 3)
        else:
            pixels = render(objs, image_size)
        rel = f"images/{i:06d}.img"
        write_image(out / rel, pixels)
        rec = {"image": rel, "caption": caption_from_facts(items, rels)}
        if frames:
            rec["frames"] = frames
        records.append(rec)
    manifest = out / MANIFEST
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


@dataclass
class Sample:
    image: np.ndarray
    caption: str


def load_manifest(path) -> list[Sample]:
    """Read a manifest (file or directory containing ``manifest.jsonl``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    root = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "image" not in rec or "caption" not in rec:
                raise ValueError(f"{path}:{lineno}: record needs 'image' and 'caption'")
            pixels = read_image(root / rec["image"])
            samples.append(Sample(to_array(pixels, rec.get("frames")), rec["caption"]))
    return samples


def stack_images(samples: Iterable[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])
