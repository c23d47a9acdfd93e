"""Closed-form parameter and MAC counts, cross-checked by an instrumented forward pass.

MACs (multiply-accumulates) are the unit throughout and are what the tables
label as FLOPs. Bias additions, softmax, LayerNorm and activations are left
out unless ``elementwise=True``, in which case each LayerNorm row, softmax row
and GELU element counts as one operation.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RunConfig
from .encoder import EncoderConfig
from .mixers import mixer_params
from .ops import ConfigError
from .tensor import count_macs, no_grad


class ConsistencyError(AssertionError):
    """Analytic and measured MAC counts disagree."""


def cost_msa(h: int, w: int, C: int) -> int:
    """Global attention: ``4hwC^2 + 2(hw)^2 C``."""
    n = h * w
    return 4 * n * C * C + 2 * n * n * C


def cost_wmsa(h: int, w: int, C: int, M: int) -> int:
    """Window attention: ``4hwC^2 + 2M^2 hwC``."""
    if h % M or w % M:
        raise ValueError(f"window {M} does not divide grid {h}x{w}")
    return 4 * h * w * C * C + 2 * M * M * h * w * C


def cost_wmlp(h: int, w: int, C: int, M: int) -> int:
    """Window spatial MLP: ``hw M^2 C``, independent of the head count."""
    if h % M or w % M:
        raise ValueError(f"window {M} does not divide grid {h}x{w}")
    return h * w * M * M * C


@dataclass
class CostRow:
    name: str
    params: int
    analytic_macs: int
    measured_macs: Optional[int] = None


@dataclass
class CostReport:
    model: str
    rows: list[CostRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def analytic_macs(self) -> int:
        return sum(r.analytic_macs for r in self.rows)

    @property
    def measured_macs(self) -> Optional[int]:
        if any(r.measured_macs is None for r in self.rows):
            return None
        return sum(r.measured_macs for r in self.rows)

    def subtotal(self, prefix: str) -> tuple[int, int, Optional[int]]:
        rows = [r for r in self.rows if r.name.startswith(prefix)]
        measured = None if any(r.measured_macs is None for r in rows) else sum(r.measured_macs for r in rows)
        return sum(r.params for r in rows), sum(r.analytic_macs for r in rows), measured

    def mismatches(self) -> list[str]:
        return [f"{r.name}: analytic {r.analytic_macs} != measured {r.measured_macs}"
                for r in self.rows if r.measured_macs is not None and r.measured_macs != r.analytic_macs]

    def check(self) -> None:
        bad = self.mismatches()
        if bad:
            raise ConsistencyError("MAC mismatch:\n  " + "\n  ".join(bad))


# -- analytic walk -------------------------------------------------------------

def _ln(dim: int) -> int:
    return 2 * dim


def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def encoder_rows(cfg: EncoderConfig, elementwise: bool = False) -> list[CostRow]:
    dims = cfg.stage_dims()
    grids = cfg.stage_grids()
    windows = cfg.stage_windows()
    heads = cfg.stage_heads()
    k_in = cfg.in_chans * cfg.patch_size ** 2 * (cfg.tubelet if cfg.video else 1)
    n0 = math.prod(grids[0])
    c0 = dims[0]
    rows = [CostRow("encoder.patch_embed", _linear(k_in, c0) + _ln(c0),
                    n0 * k_in * c0 + (n0 if elementwise else 0))]
    for i in range(4):
        n = math.prod(grids[i])
        c = dims[i]
        s = math.prod(windows[i])
        if i > 0:
            cp = dims[i - 1]
            rows.append(CostRow(f"encoder.stage{i}.merge", _ln(4 * cp) + _linear(4 * cp, 2 * cp, bias=False),
                                n * 4 * cp * 2 * cp + (n if elementwise else 0)))
        mix_p = mix_m = mlp_p = mlp_m = 0
        hidden = cfg.mlp_ratio * c
        for _ in range(cfg.depths[i]):
            mix_p += _ln(c) + mixer_params(cfg.mixer, c, heads[i], s)
            if cfg.mixer in ("w_mlp", "pool"):
                macs = n * s * c
                soft = 0
            else:
                macs = 4 * n * c * c + 2 * s * n * c
                soft = heads[i] * n
            mix_m += macs + ((n + soft) if elementwise else 0)
            mlp_p += _ln(c) + _linear(c, hidden) + _linear(hidden, c)
            mlp_m += 2 * n * c * hidden + ((n + n * hidden) if elementwise else 0)
        rows.append(CostRow(f"encoder.stage{i}.mixer", mix_p, mix_m))
        rows.append(CostRow(f"encoder.stage{i}.mlp", mlp_p, mlp_m))
    n_last = math.prod(grids[-1])
    rows.append(CostRow("encoder.head", _linear(dims[-1], cfg.out_dim), n_last * dims[-1] * cfg.out_dim))
    return rows


def decoder_rows(cfg: RunConfig, vocab_size: int, length: int, memory_len: int,
                 elementwise: bool = False) -> list[CostRow]:
    d, f, h, nb = cfg.dec_dim, cfg.dec_ffn, cfg.dec_heads, cfg.dec_blocks
    attn_p = 4 * _linear(d, d)
    ew = 1 if elementwise else 0
    self_m = nb * (4 * length * d * d + 2 * length * length * d + ew * (length + h * length))
    cross_m = nb * (2 * length * d * d + 2 * memory_len * d * d + 2 * length * memory_len * d
                    + ew * (length + h * length))
    ffn_m = nb * (2 * length * d * f + ew * length)
    return [
        CostRow("decoder.embed", vocab_size * d, 0),
        CostRow("decoder.self_attn", nb * (_ln(d) + attn_p), self_m),
        CostRow("decoder.cross_attn", nb * (_ln(d) + attn_p), cross_m),
        CostRow("decoder.ffn", nb * (_ln(d) + _linear(d, f) + _linear(f, d)), ffn_m),
        CostRow("decoder.out", _ln(d) + _linear(d, vocab_size), length * d * vocab_size + ew * length),
    ]


def _row_for_scope(scope: str) -> str:
    parts = scope.split(".")
    if parts[0] == "encoder":
        if parts[1].startswith("stage"):
            if parts[2] == "merge":
                return ".".join(parts[:3])
            return f"encoder.{parts[1]}.{parts[3]}"
        return f"encoder.{parts[1]}"
    if parts[0] == "decoder":
        if parts[1] == "out":
            return "decoder.out"
        return f"decoder.{parts[2]}"
    return scope


def measure(cfg: RunConfig, vocab_size: int, length: int, include_decoder: bool = True,
            elementwise: bool = False, model=None) -> dict[str, int]:
    """Run one instrumented forward (batch 1, zero input) and bucket MACs per report row."""
    from .model import CaptionModel

    model = model or CaptionModel(cfg, vocab_size, np.random.default_rng(cfg.seed))
    enc = model.encoder.cfg
    shape = (1, enc.in_chans) + ((enc.frames,) if enc.video else ()) + enc.img_size
    x = np.zeros(shape, dtype=np.float32)
    ids = np.full((1, length), 4 % vocab_size, dtype=np.int64)
    with no_grad(), count_macs(elementwise=elementwise) as counter:
        if include_decoder:
            model(x, ids)
        else:
            model.encode(x)
        scopes = dict(counter.by_scope)
    buckets: dict[str, int] = {}
    for scope, macs in scopes.items():
        key = _row_for_scope(scope)
        buckets[key] = buckets.get(key, 0) + macs
    return buckets


def model_report(cfg: RunConfig, vocab_size: int = 64, length: Optional[int] = None,
                 include_decoder: bool = True, measure_forward: bool = True,
                 elementwise: bool = False, strict: bool = True) -> CostReport:
    """Analytic cost table, optionally verified against a measured forward pass."""
    enc = cfg.encoder_config()
    length = cfg.max_len if length is None else length
    if not 1 <= length <= cfg.max_len:
        raise ConfigError(f"decoder length {length} must lie in [1, max_len={cfg.max_len}]")
    rows = encoder_rows(enc, elementwise)
    if include_decoder:
        rows += decoder_rows(cfg, vocab_size, length, enc.memory_len(), elementwise)
    report = CostReport(model=cfg.model, rows=rows, config={
        "model": cfg.model, "image_size": cfg.image_size, "patch": cfg.patch, "embed_dim": cfg.embed_dim,
        "window": cfg.window, "depths": cfg.depths, "vocab_size": vocab_size, "decoder_len": length,
    })
    if measure_forward:
        measured = measure(cfg, vocab_size, length, include_decoder, elementwise)
        names = {r.name for r in rows}
        extra = set(measured) - names
        if extra:
            raise ConsistencyError(f"measured MACs in unexpected modules: {sorted(extra)}")
        for r in rows:
            r.measured_macs = measured.get(r.name, 0)
        if strict:
            report.check()
    return report


# -- tables ----------------------------------------------------------------------

COLUMNS = ("model", "module", "params", "analytic_macs", "measured_macs")


def _summary_rows(report: CostReport, per_module: bool):
    out = []
    if per_module:
        for r in report.rows:
            out.append((report.model, r.name, r.params, r.analytic_macs, r.measured_macs))
    p, a, m = report.subtotal("encoder.")
    out.append((report.model, "encoder total", p, a, m))
    if any(r.name.startswith("decoder.") for r in report.rows):
        out.append((report.model, "full model total", report.params, report.analytic_macs, report.measured_macs))
    return out


def to_csv(reports: list[CostReport], per_module: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rep in reports:
        for row in _summary_rows(rep, per_module):
            writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def to_markdown(reports: list[CostReport], per_module: bool = True) -> str:
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for rep in reports:
        for model, name, p, a, m in _summary_rows(rep, per_module):
            meas = "-" if m is None else f"{m:,}"
            lines.append(f"| {model} | {name} | {p:,} | {a:,} | {meas} |")
    return "\n".join(lines) + "\n"
