"""Run configuration: one flat ``key=value`` text format for CLI, checkpoints and estimator."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .decoder import DecoderConfig
from .encoder import DEFAULT_HEADS, EncoderConfig
from .ops import ConfigError

MODEL_KINDS = {"swin": "w_msa", "swinmlp": "w_mlp", "video-swinmlp": "w_mlp"}


@dataclass
class RunConfig:
    model: str = "swinmlp"
    image_size: int = 224
    patch: int = 4
    embed_dim: int = 128
    window: int = 14
    depths: tuple[int, ...] = (2, 2, 18, 2)
    heads: tuple[int, ...] = DEFAULT_HEADS
    clamp_window: bool = True
    shift_mask: bool = False
    frames: int = 4
    tubelet: int = 2
    temporal_window: int = 2
    dec_blocks: int = 6
    dec_dim: int = 512
    dec_heads: int = 8
    dec_ffn: int = 2048
    max_len: int = 24
    seed: int = 0
    epochs: int = 100
    batch: int = 9
    lr: float = 3e-4
    warmup: int = 20000
    max_steps: int = 0
    data: str = ""
    out: str = ""

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {sorted(MODEL_KINDS)}, got {self.model!r}")
        for name in ("image_size", "patch", "embed_dim", "window", "dec_blocks", "dec_dim",
                     "dec_heads", "dec_ffn", "batch", "frames", "tubelet", "temporal_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.warmup < 1 or self.max_steps < 0 or self.lr <= 0:
            raise ConfigError("epochs/max_steps must be >= 0, warmup >= 1 and lr > 0")
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)

    @property
    def video(self) -> bool:
        return self.model == "video-swinmlp"

    @property
    def mixer(self) -> str:
        return MODEL_KINDS[self.model]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            img_size=(self.image_size, self.image_size),
            patch_size=self.patch,
            embed_dim=self.embed_dim,
            depths=self.depths,
            heads=self.heads,
            window=self.window,
            mixer=self.mixer,
            out_dim=self.dec_dim,
            frames=self.frames if self.video else None,
            tubelet=self.tubelet,
            temporal_window=self.temporal_window,
            clamp_window=self.clamp_window,
            shift_mask=self.shift_mask,
        )

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(vocab_size=vocab_size, blocks=self.dec_blocks, model_dim=self.dec_dim,
                             heads=self.dec_heads, ffn_dim=self.dec_ffn, max_len=self.max_len)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, getattr(defaults, key))
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _coerce(key: str, value: str, like):
    try:
        if isinstance(like, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(like, tuple):
            return tuple(int(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value
