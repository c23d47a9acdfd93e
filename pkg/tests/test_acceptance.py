"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(section "acceptance criteria"). Run alone with ``pytest tests/test_acceptance.py``.
"""
import itertools
import time

import numpy as np
import pytest

from gradcheck import check_gradients, randomize
from swincap.complexity import cost_msa, cost_wmlp, cost_wmsa, model_report
from swincap.config import RunConfig
from swincap.decoder import CaptionDecoder, DecoderBlock, DecoderConfig
from swincap.encoder import EncoderConfig, SwinEncoder
from swincap.metrics import EvalRecord, bleu4, cider
from swincap.mixers import WindowAttention, WindowMLP, global_msa
from swincap.model import CaptionModel
from swincap.nn import FeedForward, LayerNorm, Linear
from swincap.patching import FeatureGrid, PatchEmbed, PatchMerging, PatchSpec, cyclic_shift, window_partition, window_reverse
from swincap.tensor import Tensor, count_macs, no_grad
from swincap import checkpoint
from swincap.train import train
from toy import toy_config, toy_corpus, train_to_target

pytestmark = pytest.mark.slow


# -- 1 ---------------------------------------------------------------------------------

def _layer_cases(rng):
    """(name, module, input builder, output adapter) for every parameterised layer."""
    def tokens(*shape):
        return lambda: Tensor(rng.normal(size=shape), requires_grad=True)

    grid = lambda t, g: FeatureGrid(t, g)  # noqa: E731
    return [
        ("Linear", Linear(5, 4, rng), tokens(2, 3, 5), lambda m, x: m(x)),
        ("LayerNorm", LayerNorm(6), tokens(2, 3, 6), lambda m, x: m(x)),
        ("FeedForward-gelu", FeedForward(4, 8, rng), tokens(2, 3, 4), lambda m, x: m(x)),
        ("FeedForward-relu", FeedForward(4, 8, rng, activation="relu"), tokens(2, 3, 4), lambda m, x: m(x)),
        ("PatchEmbed-2d", PatchEmbed(PatchSpec(p=2, C=4), rng), tokens(1, 3, 4, 4), lambda m, x: m(x).tokens),
        ("PatchEmbed-3d", PatchEmbed(PatchSpec(p=2, C=4, t=2), rng, video=True), tokens(1, 3, 2, 4, 4),
         lambda m, x: m(x).tokens),
        ("PatchMerging", PatchMerging(3, rng), tokens(1, 16, 3), lambda m, x: m(grid(x, (4, 4))).tokens),
        ("WindowMLP", WindowMLP(6, 2, 4, rng), tokens(2, 4, 6), lambda m, x: m(x)),
        ("WindowAttention", WindowAttention(6, 2, rng), tokens(2, 4, 6), lambda m, x: m(x)),
        ("DecoderBlock", DecoderBlock(DecoderConfig(9, 1, 8, 2, 16), rng), tokens(2, 3, 8),
         lambda m, x: m(x, x * 0.5, np.triu(np.ones((3, 3), bool), 1))),
        ("CaptionDecoder", CaptionDecoder(DecoderConfig(9, 1, 8, 2, 16, 6), rng), tokens(2, 3, 8),
         lambda m, x: m(x, np.array([[1, 4, 5], [1, 6, 7]]))),
    ]


def test_criterion_1_gradients(criterion):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    errors = {}
    for name, module, make_input, run in _layer_cases(rng):
        randomize(module, rng)
        x = make_input()
        proj = rng.normal(size=run(module, x).shape)
        errors[name] = check_gradients(lambda: (run(module, x) * proj).sum(), [x] + module.parameters(), rng)
    for mixer in ("w_mlp", "w_msa"):
        cfg = EncoderConfig(img_size=32, patch_size=4, embed_dim=8, depths=(1, 1, 1, 1), window=2,
                            out_dim=16, mixer=mixer)
        enc = randomize(SwinEncoder(cfg, rng), rng)
        x = rng.normal(size=(1, 3, 32, 32))
        proj = rng.normal(size=(1, 1, 16))
        errors[f"SwinEncoder-{mixer}"] = check_gradients(lambda: (enc(x) * proj).sum(), enc.parameters(), rng,
                                                        samples=3)
    cfg = RunConfig(image_size=32, patch=4, embed_dim=8, window=2, depths=(1, 1, 1, 1), dec_blocks=1,
                    dec_dim=16, dec_heads=2, dec_ffn=32, max_len=8)
    model = randomize(CaptionModel(cfg, 10, rng), rng)
    images = rng.normal(size=(2, 3, 32, 32))
    errors["full tiny model"] = check_gradients(lambda: model.loss(images, [[4, 5, 6], [7]]),
                                                model.parameters(), rng, samples=3)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5 and elapsed < 120
    criterion(1, "gradient suite", ok,
              f"{len(errors)} checks, worst rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok, errors


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_geometry(criterion):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(200):
        rank = int(rng.integers(2, 4))
        window = tuple(int(w) for w in rng.integers(1, 5, rank))
        grid = tuple(w * int(k) for w, k in zip(window, rng.integers(1, 4, rank)))
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        g = FeatureGrid(Tensor(rng.normal(size=(b, int(np.prod(grid)), c))), grid)
        back = window_reverse(window_partition(g, window), grid, window, batch=b)
        shift = tuple(int(rng.integers(-n, n + 1)) for n in grid)
        unshifted = cyclic_shift(cyclic_shift(g, shift), [-s for s in shift])
        failures += not np.array_equal(back.tokens.data, g.tokens.data)
        failures += not np.array_equal(unshifted.tokens.data, g.tokens.data)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 10
    criterion(2, "geometry roundtrips", ok, f"200 configs, {failures} mismatches, {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_shapes(criterion):
    cfg = EncoderConfig(img_size=224, patch_size=4, embed_dim=128)
    enc = SwinEncoder(cfg, np.random.default_rng(0))
    with no_grad():
        stages = enc.forward_stages(np.zeros((1, 3, 224, 224), np.float32))
        memory = enc.head(stages[-1].tokens)
    shapes = [s.tokens.shape[1:] for s in stages] + [memory.shape[1:]]
    expected = [(3136, 128), (784, 256), (196, 512), (49, 1024), (49, 512)]
    ok = shapes == expected
    criterion(3, "shape pipeline", ok, " -> ".join(str(list(s)) for s in shapes))
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def _measured(kind, h, w, c, m, rng):
    with no_grad(), count_macs() as mc:
        if kind == "msa":
            global_msa(Tensor(np.zeros((h * w, c), np.float32)), WindowAttention(c, 4, rng))
        else:
            module = WindowMLP(c, 4, m * m, rng) if kind == "wmlp" else WindowAttention(c, 4, rng)
            module(Tensor(np.zeros((h * w // (m * m), m * m, c), np.float32)))
    return mc.total_macs


def test_criterion_4_complexity(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    ref = {
        "wmsa": (cost_wmsa(56, 56, 128, 14), 362_872_832, _measured("wmsa", 56, 56, 128, 14, rng)),
        "msa": (cost_msa(56, 56, 128), 2_723_151_872, _measured("msa", 56, 56, 128, 14, rng)),
        "wmlp": (cost_wmlp(56, 56, 128, 14), 78_675_968, _measured("wmlp", 56, 56, 128, 14, rng)),
    }
    ok_ref = all(a == b == c for a, b, c in ref.values())
    sweep = list(itertools.product((56, 28), (64, 128, 192), (7, 14)))
    ordered = 0
    measured_ok = True
    for side, c, m in sweep:
        costs = [cost_wmlp(side, side, c, m), cost_wmsa(side, side, c, m), cost_msa(side, side, c)]
        meas = [_measured(k, side, side, c, m, rng) for k in ("wmlp", "wmsa", "msa")]
        measured_ok &= costs == meas
        ordered += costs[0] < costs[1] < costs[2]
    elapsed = time.perf_counter() - t0
    ok = ok_ref and measured_ok and ordered == len(sweep) == 12 and elapsed < 300
    criterion(4, "complexity formulas", ok,
              f"reference points exact={ok_ref}, sweep ordered {ordered}/12, sweep measured==analytic "
              f"{measured_ok}, {elapsed:.1f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_efficiency(criterion):
    reports = {m: model_report(RunConfig(model=m), vocab_size=64) for m in ("swin", "swinmlp")}
    enc = {m: r.subtotal("encoder.") for m, r in reports.items()}
    paper = {"swin": (165.51, 19.59), "swinmlp": (99.11, 14.15)}
    ok = enc["swinmlp"][0] < enc["swin"][0] and enc["swinmlp"][1] < enc["swin"][1]
    ok &= all(r.mismatches() == [] for r in reports.values())
    detail = "; ".join(
        f"{m}: encoder {enc[m][0] / 1e6:.2f}M params {enc[m][1] / 1e9:.2f} GMACs, full model "
        f"{reports[m].params / 1e6:.2f}M {reports[m].analytic_macs / 1e9:.2f} GMACs "
        f"(reported {paper[m][0]}M / {paper[m][1]} GFLOPs)" for m in ("swinmlp", "swin"))
    criterion(5, "efficiency ordering", ok, detail)
    assert ok


# -- 6 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return {"image": toy_corpus(root / "images"), "clip": toy_corpus(root / "clips", frames=4)}


@pytest.mark.parametrize("kind", ["swinmlp", "swin", "video-swinmlp"])
def test_criterion_6_learning(kind, corpora, criterion):
    images, captions = corpora["clip" if kind == "video-swinmlp" else "image"]
    cfg = toy_config(kind)
    assert cfg.encoder_config().stage_windows()[0] == ((2, 4, 4) if kind == "video-swinmlp" else (4, 4))
    best, steps, seconds, history = train_to_target(cfg, images, captions, target=0.90, max_steps=2000)
    ok = best >= 0.90 and steps <= 2000 and seconds < 15 * 60
    criterion(6, f"end-to-end learning ({cfg.mixer}{', video' if cfg.video else ''})", ok,
              f"train BLEU-4 {best:.3f} at step {steps}, {seconds:.0f}s; trace {history}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_metric_oracles(criterion):
    b = bleu4([EvalRecord("a b c d e", ["a b c d f"])])
    recs = [EvalRecord("a b", ["a b"]), EvalRecord("a c", ["a d"]), EvalRecord("e", ["e"])]
    l15, l3 = np.log(1.5), np.log(3)
    cider_oracle = (5.0 + 2.5 + 2.5 * l15 ** 2 / (l15 ** 2 + l3 ** 2)) / 3
    c = cider(recs)
    ok = abs(b - 0.2 ** 0.25) < 1e-9 and abs(c - cider_oracle) < 1e-9
    criterion(7, "metric oracles", ok, f"bleu4 {b:.12f} vs {0.2 ** 0.25:.12f}; cider {c:.12f} vs {cider_oracle:.12f}")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_determinism(corpora, tmp_path, criterion):
    images, captions = corpora["image"]
    cfg = toy_config("swinmlp", epochs=2)
    train(cfg, images, captions, out_dir=tmp_path / "a")
    train(cfg, images, captions, out_dir=tmp_path / "b")
    logs_equal = (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    ckpt_equal = (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
    tensors, vocab, text = checkpoint.load(tmp_path / "a/last.ckpt")
    checkpoint.save(tmp_path / "resaved.ckpt", tensors, vocab, text)
    roundtrip = (tmp_path / "resaved.ckpt").read_bytes() == (tmp_path / "a/last.ckpt").read_bytes()
    ok = logs_equal and ckpt_equal and roundtrip
    criterion(8, "determinism and persistence", ok,
              f"logs identical={logs_equal}, checkpoints identical={ckpt_equal}, save/load/save identical={roundtrip}")
    assert ok
