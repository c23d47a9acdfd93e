import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients, randomize
from swincap.complexity import cost_msa, cost_wmlp, cost_wmsa
from swincap.mixers import (
    MixerConfig,
    WindowAttention,
    WindowMLP,
    WindowPool,
    build_mixer,
    global_msa,
    mixer_params,
    pool_mix,
    w_mlp_mix,
    w_msa,
)
from swincap.ops import ConfigError, ShapeError
from swincap.patching import FeatureGrid, window_partition
from swincap.tensor import Tensor, count_macs, no_grad


def wmlp_oracle(x, w, b):
    nw, s, c = x.shape
    n = w.shape[0]
    d = c // n
    out = np.zeros_like(x)
    for win in range(nw):
        for ch in range(c):
            h = ch // d
            for j in range(s):
                out[win, j, ch] = sum(w[h, j, k] * x[win, k, ch] for k in range(s)) + b[h, j]
    return out


def attention_oracle(x, attn: WindowAttention):
    def lin(layer, v):
        return v @ layer.weight.data.T + layer.bias.data

    q, k, v = lin(attn.q, x), lin(attn.k, x), lin(attn.v, x)
    nw, s, c = x.shape
    d = c // attn.heads
    out = np.zeros_like(x)
    for win in range(nw):
        for h in range(attn.heads):
            sl = slice(h * d, (h + 1) * d)
            scores = q[win, :, sl] @ k[win, :, sl].T / math.sqrt(d)
            p = np.exp(scores - scores.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            out[win, :, sl] = p @ v[win, :, sl]
    return lin(attn.proj, out)


def test_wmlp_matches_loop_oracle(rng):
    x = rng.normal(size=(3, 4, 6))
    w = rng.normal(size=(2, 4, 4))
    b = rng.normal(size=(2, 4))
    np.testing.assert_allclose(w_mlp_mix(Tensor(x), Tensor(w), Tensor(b)).data, wmlp_oracle(x, w, b), atol=1e-12)


def test_wmsa_matches_loop_oracle(rng):
    attn = randomize(WindowAttention(8, 2, rng), rng)
    x = rng.normal(size=(3, 5, 8))
    np.testing.assert_allclose(w_msa(Tensor(x), attn).data, attention_oracle(x, attn), atol=1e-10)


def test_identity_mixing_weights_pass_tokens_through(rng):
    m = WindowMLP(4, 2, 9, rng)
    m.weight.data = np.tile(np.eye(9, dtype=np.float32), (2, 1, 1))
    x = rng.normal(size=(2, 9, 4)).astype(np.float32)
    np.testing.assert_allclose(m(Tensor(x)).data, x, atol=1e-6)


def test_global_equals_window_when_one_window_covers_grid(rng):
    attn = randomize(WindowAttention(8, 4, rng), rng)
    tokens = rng.normal(size=(1, 16, 8))
    g = FeatureGrid(Tensor(tokens), (4, 4))
    windowed = w_msa(window_partition(g, (4, 4)), attn).data
    np.testing.assert_allclose(global_msa(Tensor(tokens), attn).data, windowed, atol=1e-12)
    np.testing.assert_allclose(global_msa(Tensor(tokens[0]), attn).data, windowed[0], atol=1e-12)


@pytest.mark.parametrize("kind", ["w_mlp", "w_msa", "pool"])
def test_windows_are_independent(kind, rng):
    """Perturbing one window leaves every other window's output untouched."""
    mixer = randomize(build_mixer(kind, 8, 2, (2, 2), rng), rng)
    x = rng.normal(size=(4, 4, 8))
    y = x.copy()
    y[1] += rng.normal(size=(4, 8))
    with no_grad():
        a, b = mixer(Tensor(x)).data, mixer(Tensor(y)).data
    np.testing.assert_array_equal(np.delete(a, 1, axis=0), np.delete(b, 1, axis=0))
    if kind != "pool":
        assert not np.allclose(a[1], b[1])


def test_wmlp_heads_are_independent(rng):
    m = randomize(WindowMLP(6, 3, 4, rng), rng)
    x = Tensor(rng.normal(size=(2, 4, 6)))
    before = m(x).data
    m.weight.data[1] += 1.0
    m.bias.data[1] -= 1.0
    after = m(x).data
    np.testing.assert_array_equal(before[..., :2], after[..., :2])
    np.testing.assert_array_equal(before[..., 4:], after[..., 4:])
    assert not np.allclose(before[..., 2:4], after[..., 2:4])


def test_attention_probs_rows_sum_to_one(rng):
    attn = randomize(WindowAttention(8, 2, rng), rng)
    probs = attn.attention_probs(Tensor(rng.normal(size=(3, 4, 8))))
    assert probs.shape == (3, 2, 4, 4)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)


def test_pool_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 9, 2))
    out = pool_mix(Tensor(x), (3, 3), k=3).data
    grid = x[0].reshape(3, 3, 2)
    for i in range(3):
        for j in range(3):
            nb = grid[max(0, i - 1): i + 2, max(0, j - 1): j + 2].reshape(-1, 2)
            np.testing.assert_allclose(out[0, 3 * i + j], nb.mean(0) - grid[i, j], atol=1e-12)


def test_mixer_errors(rng):
    with pytest.raises(ConfigError):
        WindowMLP(6, 4, 4, rng)
    with pytest.raises(ShapeError):
        WindowMLP(4, 2, 4, rng)(Tensor(np.zeros((1, 9, 4))))
    with pytest.raises(ConfigError):
        MixerConfig("conv", 2)
    with pytest.raises(ConfigError):
        WindowPool((2, 2), pool_size=2)
    assert MixerConfig("w_mlp", 4).head_dim(32) == 8


@pytest.mark.parametrize("kind,dim,heads,tokens", [("w_mlp", 32, 4, 16), ("w_msa", 32, 4, 16), ("pool", 8, 1, 9)])
def test_mixer_params_closed_form(kind, dim, heads, tokens, rng):
    window = (3, 3) if kind == "pool" else (4, 4)
    assert build_mixer(kind, dim, heads, window, rng).num_parameters() == mixer_params(kind, dim, heads, tokens)


def test_wmlp_params_do_not_depend_on_channels(rng):
    assert WindowMLP(32, 4, 16, rng).num_parameters() == WindowMLP(512, 4, 16, rng).num_parameters()


@pytest.mark.parametrize("kind", ["w_mlp", "w_msa"])
def test_mixer_gradients(kind, rng):
    mixer = randomize(build_mixer(kind, 6, 2, (2, 2), rng), rng)
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    proj = rng.normal(size=(2, 4, 6))
    assert check_gradients(lambda: (mixer(x) * proj).sum(), [x] + mixer.parameters(), rng) < 1e-5


def test_masked_attention_gradients(rng):
    attn = randomize(WindowAttention(4, 2, rng), rng)
    x = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    mask = np.triu(np.ones((4, 4), bool), 1)
    proj = rng.normal(size=(1, 4, 4))
    assert check_gradients(lambda: (attn(x, mask=mask) * proj).sum(), [x] + attn.parameters(), rng) < 1e-5


# -- instrumented MAC counts at the reference resolution ------------------------------

def _windows(h, w, c, m):
    return Tensor(np.zeros((h * w // (m * m), m * m, c), dtype=np.float32))


def test_wmlp_macs_reference_point(rng):
    with no_grad(), count_macs() as mc:
        WindowMLP(128, 4, 196, rng)(_windows(56, 56, 128, 14))
    assert mc.total_macs == cost_wmlp(56, 56, 128, 14) == 78_675_968


def test_wmsa_macs_reference_point(rng):
    with no_grad(), count_macs() as mc:
        WindowAttention(128, 4, rng)(_windows(56, 56, 128, 14))
    assert mc.total_macs == cost_wmsa(56, 56, 128, 14) == 362_872_832


def test_msa_macs_reference_point(rng):
    with no_grad(), count_macs() as mc:
        global_msa(Tensor(np.zeros((3136, 128), dtype=np.float32)), WindowAttention(128, 4, rng))
    assert mc.total_macs == cost_msa(56, 56, 128) == 2_723_151_872


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.sampled_from([4, 8]))
def test_measured_macs_match_formulas(a, b, m, heads_pow, c):
    rng = np.random.default_rng(0)
    h, w = a * m, b * m
    heads = math.gcd(2 ** heads_pow, c)
    for module, formula in ((WindowMLP(c, heads, m * m, rng), cost_wmlp(h, w, c, m)),
                            (WindowAttention(c, heads, rng), cost_wmsa(h, w, c, m))):
        with no_grad(), count_macs() as mc:
            module(_windows(h, w, c, m))
        assert mc.total_macs == formula
