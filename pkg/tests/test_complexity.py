import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swincap.complexity import (
    ConsistencyError,
    CostReport,
    CostRow,
    cost_msa,
    cost_wmlp,
    cost_wmsa,
    encoder_rows,
    model_report,
    to_csv,
    to_markdown,
)
from swincap.config import RunConfig
from swincap.ops import ConfigError
from swincap.encoder import SwinEncoder
from swincap.model import CaptionModel

SWEEP = list(itertools.product((56, 28), (64, 128, 192), (7, 14)))


def toy(model="swinmlp", **kw):
    base = dict(model=model, image_size=64, patch=4, embed_dim=16, window=4, depths=(1, 1, 2, 1),
                dec_blocks=1, dec_dim=32, dec_heads=4, dec_ffn=64, max_len=10)
    base.update(kw)
    return RunConfig(**base)


def test_reference_costs():
    assert cost_wmsa(56, 56, 128, 14) == 362_872_832
    assert cost_msa(56, 56, 128) == 2_723_151_872
    assert cost_wmlp(56, 56, 128, 14) == 78_675_968


def test_costs_reject_indivisible_windows():
    with pytest.raises(ValueError):
        cost_wmsa(56, 56, 128, 9)
    with pytest.raises(ValueError):
        cost_wmlp(10, 10, 8, 3)


@pytest.mark.parametrize("side,C,M", SWEEP)
def test_sweep_ordering(side, C, M):
    assert len(SWEEP) == 12
    assert cost_wmlp(side, side, C, M) < cost_wmsa(side, side, C, M) < cost_msa(side, side, C)


def test_wmsa_equals_msa_when_window_covers_grid():
    assert cost_wmsa(14, 14, 64, 14) == cost_msa(14, 14, 64)


@pytest.mark.parametrize("model", ["swinmlp", "swin", "video-swinmlp"])
@pytest.mark.parametrize("elementwise", [False, True])
def test_analytic_equals_measured(model, elementwise):
    rep = model_report(toy(model), vocab_size=20, elementwise=elementwise)
    assert rep.mismatches() == []
    assert rep.measured_macs == rep.analytic_macs


@pytest.mark.parametrize("model", ["swinmlp", "swin", "video-swinmlp"])
def test_param_counts_match_built_model(model):
    cfg = toy(model)
    rep = model_report(cfg, vocab_size=20, measure_forward=False)
    built = CaptionModel(cfg, 20, np.random.default_rng(0))
    assert rep.params == built.num_parameters()
    enc_params = model_report(cfg, vocab_size=20, include_decoder=False, measure_forward=False).params
    assert enc_params == built.encoder.num_parameters()


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(["swinmlp", "swin"]), st.sampled_from([32, 64]), st.sampled_from([8, 12]),
       st.sampled_from([1, 2, 4]), st.lists(st.integers(1, 2), min_size=4, max_size=4), st.integers(1, 10))
def test_random_configs_consistent(model, size, dim, window, depths, length):
    cfg = toy(model, image_size=size, embed_dim=dim, window=window, depths=tuple(depths),
              heads=(2, 2, 4, 4))
    rep = model_report(cfg, vocab_size=9, length=length, strict=True)
    assert rep.measured_macs == rep.analytic_macs


def test_swinmlp_cheaper_than_swin_at_same_config():
    mlp = model_report(toy("swinmlp", embed_dim=32, window=8), include_decoder=False)
    att = model_report(toy("swin", embed_dim=32, window=8), include_decoder=False)
    assert mlp.params < att.params and mlp.analytic_macs < att.analytic_macs


def test_decoder_length_bounded():
    with pytest.raises(ConfigError):
        model_report(toy(), length=11)


def test_report_check_raises_on_mismatch():
    rep = CostReport("x", [CostRow("encoder.head", 1, 10, 11)])
    with pytest.raises(ConsistencyError):
        rep.check()


def test_reference_encoder_analytic_totals():
    """The reference L encoder, computed without building it (224 px, C=128, depths 2-2-18-2, M=14)."""
    rows = {m: encoder_rows(RunConfig(model=m).encoder_config()) for m in ("swin", "swinmlp")}
    params = {m: sum(r.params for r in rs) for m, rs in rows.items()}
    macs = {m: sum(r.analytic_macs for r in rs) for m, rs in rows.items()}
    assert params == {"swin": 87_202_432, "swinmlp": 71_439_712}
    assert macs == {"swin": 16_340_717_568, "swinmlp": 10_813_229_056}


def test_tables(tmp_path):
    reps = [model_report(toy(m), vocab_size=20) for m in ("swin", "swinmlp")]
    text = to_csv(reps, per_module=False)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["model", "module", "params", "analytic_macs", "measured_macs"]
    assert [r["module"] for r in rows] == ["encoder total", "full model total"] * 2
    assert rows[1]["analytic_macs"] == rows[1]["measured_macs"]
    md = to_markdown(reps)
    assert md.startswith("| model | module |") and "encoder.stage2.mixer" in md


def test_measured_encoder_matches_module_sum():
    cfg = toy("swin")
    rep = model_report(cfg, include_decoder=False)
    enc = SwinEncoder(cfg.encoder_config(), np.random.default_rng(0))
    assert rep.params == enc.num_parameters()
