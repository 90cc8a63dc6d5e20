import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fraesormer import functional as F
from fraesormer.attention import (
    ATKSPA, AttentionConfig, atk_spa_forward, gdtko_compute_k, k_from_density, sdsa_forward,
    split_partial, topk_mask_rowwise,
)
from fraesormer.errors import ConfigError, ContractError
from fraesormer.gradsuite import randomize
from fraesormer.tensor import Tensor, masked_fill, matmul, mul, sum_all


def make_attn(channels=8, heads=2, ratio=Fraction(1, 2), dtype=np.float64, seed=0, **kw):
    cfg = AttentionConfig(channels, heads=heads, partial_ratio=ratio, **kw)
    attn = ATKSPA(cfg, dtype=dtype)
    randomize(attn, np.random.default_rng(seed), scale=0.5)
    for p in attn.parameters():
        p.data = p.data.astype(dtype)
    return cfg, attn


# ------------------------------------------------------------ split_partial
def test_split_quarter_of_64():
    cfg = AttentionConfig(64, heads=2)
    assert (cfg.attn_channels, cfg.bypass_channels) == (16, 48)
    a, s = split_partial(Tensor(np.zeros((1, 64, 2, 2))), cfg)
    assert a.shape[1] == 16 and s.shape[1] == 48


def test_split_full_ratio_has_empty_bypass(rng):
    cfg = AttentionConfig(8, heads=2, partial_ratio=1)
    x = Tensor(rng.normal(size=(1, 8, 3, 3)))
    a, s = split_partial(x, cfg)
    assert s.shape == (1, 0, 3, 3)
    np.testing.assert_array_equal(a.data, x.data)


def test_split_half_index_by_index(rng):
    x = rng.normal(size=(2, 8, 4, 4))
    a, s = split_partial(Tensor(x), AttentionConfig(8, heads=1, partial_ratio=Fraction(1, 2)))
    for n in range(2):
        for c in range(8):
            src = a.data[n, c] if c < 4 else s.data[n, c - 4]
            assert np.array_equal(src, x[n, c])


def test_split_config_errors():
    with pytest.raises(ConfigError):
        AttentionConfig(8, heads=3, partial_ratio=Fraction(1, 2))
    with pytest.raises(ConfigError):
        AttentionConfig(8, heads=4, partial_ratio=Fraction(1, 4))
    with pytest.raises(ConfigError):
        AttentionConfig(8, partial_ratio=0)
    with pytest.raises(ConfigError):
        split_partial(Tensor(np.zeros((1, 6, 2, 2))), AttentionConfig(8, heads=1))


# ---------------------------------------------------------------- GDTKO
def _set_gate(attn, bias):
    attn.gate.proj.weight.data[...] = 0.0
    attn.gate.proj.bias.data[...] = bias


def test_gdtko_uniform_half_gate(rng):
    cfg, attn = make_attn(channels=16, heads=1, ratio=Fraction(1, 2))
    assert cfg.head_dim == 8
    _set_gate(attn, 0.0)
    k, rho = gdtko_compute_k(Tensor(rng.normal(size=(3, 8, 5, 5))), attn.gate, cfg.head_dim)
    np.testing.assert_array_equal(rho, 0.5)
    np.testing.assert_array_equal(k, 4)


def test_gdtko_saturated_gate_gives_full_density(rng):
    cfg, attn = make_attn(channels=16, heads=1, ratio=Fraction(1, 2))
    _set_gate(attn, 40.0)
    k, _ = gdtko_compute_k(Tensor(rng.normal(size=(2, 8, 4, 4))), attn.gate, cfg.head_dim)
    np.testing.assert_array_equal(k, cfg.head_dim)


def test_gdtko_low_density_clamps_to_one(rng):
    assert round(0.03 * 16) == 0
    assert k_from_density(0.03, 16) == 1
    cfg, attn = make_attn(channels=32, heads=1, ratio=Fraction(1, 2))
    _set_gate(attn, math.log(0.03 / 0.97))
    k, rho = gdtko_compute_k(Tensor(rng.normal(size=(1, 16, 4, 4))), attn.gate, 16)
    assert abs(rho[0] - 0.03) < 1e-12 and k[0] == 1


def test_gdtko_formula_on_grid_and_monotone():
    grid = np.append(np.arange(0.01, 0.99, 0.04), 0.99)
    for d in (1, 2, 5, 8, 10, 16):
        ks = k_from_density(grid, d)
        expected = [min(max(math.floor(r * d + 0.5), 1), d) for r in grid]
        np.testing.assert_array_equal(ks, expected)
        assert np.all(np.diff(ks) >= 0)


def test_gdtko_k_varies_per_sample(rng):
    cfg, attn = make_attn(channels=16, heads=1, ratio=Fraction(1, 2))
    attn.gate.proj.weight.data[...] = 0.0
    attn.gate.proj.weight.data[0, 0] = 4.0
    x = np.zeros((2, 8, 3, 3))
    x[0, 0] = -3.0
    x[1, 0] = 3.0
    k, _ = gdtko_compute_k(Tensor(x), attn.gate, cfg.head_dim)
    assert k[0] == 1 and k[1] == cfg.head_dim


# ----------------------------------------------------------- top-k masking
def test_topk_three_elements():
    np.testing.assert_array_equal(topk_mask_rowwise(np.array([[0.9, 0.1, 0.5]]), 2).mask, [[1, 0, 1]])


def test_topk_full_selection(rng):
    m = topk_mask_rowwise(rng.normal(size=(2, 5, 5)), 5)
    assert m.k == 5 and m.mask.all()


def test_topk_tie_breaks_to_lowest_index():
    np.testing.assert_array_equal(topk_mask_rowwise(np.array([[0.5, 0.5, 0.1]]), 1).mask, [[1, 0, 0]])


def test_topk_matches_bruteforce_on_random_rows(rng):
    scores = rng.normal(size=(1000, 8))
    for k in (1, 4, 8):
        mask = topk_mask_rowwise(scores, k).mask
        for row, got in zip(scores, mask):
            assert got.tolist() == oracles.topk_row_bruteforce(row.tolist(), k)


def test_topk_k_out_of_range():
    with pytest.raises(ContractError):
        topk_mask_rowwise(np.zeros((2, 4, 4)), 0)
    with pytest.raises(ContractError):
        topk_mask_rowwise(np.zeros((2, 4, 4)), 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.data())
def test_topk_rows_hold_exactly_k_ones(d, data):
    k = data.draw(st.integers(1, d))
    vals = data.draw(st.lists(st.sampled_from([-1.0, 0.0, 0.5, 2.0]), min_size=2 * d * d, max_size=2 * d * d))
    m = topk_mask_rowwise(np.array(vals).reshape(2, d, d), k).mask
    assert set(np.unique(m)) <= {0, 1}
    assert np.all(m.sum(axis=-1) == k)


# ------------------------------------------------------------ ATK-SPA forward
def test_full_selection_equals_dense_float32(rng):
    cfg, attn = make_attn(channels=16, heads=2, ratio=Fraction(1, 2), dtype=np.float32)
    x = Tensor(rng.normal(size=(2, 16, 5, 5)).astype(np.float32))
    _, aux = atk_spa_forward(x, cfg, attn, k=cfg.head_dim, return_aux=True)
    dense = sdsa_forward(split_partial(x, cfg)[0], attn)
    assert np.abs(aux["attn_out"].data - dense.data).max() < 1e-6


def test_saturated_gate_equals_dense(rng):
    cfg, attn = make_attn(channels=16, heads=2, ratio=Fraction(1, 2), dtype=np.float32)
    _set_gate(attn, 40.0)
    x = Tensor(rng.normal(size=(1, 16, 4, 4)).astype(np.float32))
    _, aux = atk_spa_forward(x, cfg, attn, return_aux=True)
    assert aux["k"][0] == cfg.head_dim
    dense = sdsa_forward(split_partial(x, cfg)[0], attn)
    assert np.abs(aux["attn_out"].data - dense.data).max() < 1e-6


def test_bypass_channels_untouched(rng):
    cfg, attn = make_attn(channels=16, heads=1, ratio=Fraction(1, 4))
    x = rng.normal(size=(2, 16, 4, 4))
    _, aux = atk_spa_forward(Tensor(x), cfg, attn, return_aux=True)
    assert aux["x_sup"].data.tobytes() == np.ascontiguousarray(x[:, 4:]).tobytes()


def test_straight_line_oracle_k1(rng):
    cfg, attn = make_attn(channels=8, heads=2, ratio=Fraction(1, 2), seed=3)
    assert cfg.head_dim == 2
    x = rng.normal(size=(1, 8, 4, 4))
    out = atk_spa_forward(Tensor(x), cfg, attn, k=1).data

    w = {name: p.data for name, p in attn.named_parameters()}
    x_att = x[:, :4]
    qkv = oracles.conv2d_naive(x_att, w["qkv_pw.weight"], w["qkv_pw.bias"])
    qkv = oracles.conv2d_naive(qkv, w["qkv_dw.weight"], w["qkv_dw.bias"], padding=1, groups=12)
    q, k, v = qkv[0, :4], qkv[0, 4:8], qkv[0, 8:]
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        qh, kh, vh = (t[sl].reshape(2, 16) for t in (q, k, v))
        scores, _, _ = oracles.channel_attention_naive(qh, kh, vh, w["rel_bias"][h], math.sqrt(2))
        keep = np.array([oracles.topk_row_bruteforce(list(r), 1) for r in scores])
        _, _, o = oracles.channel_attention_naive(qh, kh, vh, w["rel_bias"][h], math.sqrt(2), keep=keep)
        heads.append(o.reshape(2, 4, 4))
    joined = np.concatenate(heads + [x[0, 4:]])[None]
    ref = oracles.conv2d_naive(joined, w["proj.weight"], w["proj.bias"])
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-10)


def test_zero_fill_mode_matches_oracle(rng):
    cfg, attn = make_attn(channels=8, heads=1, ratio=Fraction(1, 2), seed=5, mask_mode="zero_pre_softmax")
    x = rng.normal(size=(1, 8, 3, 3))
    _, aux = atk_spa_forward(Tensor(x), cfg, attn, k=2, return_aux=True)
    scores = aux["scores"].data[0, 0]
    keep = np.array([oracles.topk_row_bruteforce(list(r), 2) for r in scores])
    expected = np.array([oracles.softmax_row([s if kp else 0.0 for s, kp in zip(r, kr)]) for r, kr in zip(scores, keep)])
    np.testing.assert_allclose(aux["attn"].data[0, 0], expected, rtol=1e-12)
    # zero fill leaves non-zero weight on unselected entries
    assert np.all(aux["attn"].data[0, 0][keep == 0] > 0)


def test_fixed_fraction_mode(rng):
    cfg, attn = make_attn(channels=16, heads=1, ratio=Fraction(1, 2), topk_mode="fixed", fixed_k_fraction=0.25)
    _, aux = atk_spa_forward(Tensor(rng.normal(size=(2, 16, 3, 3))), cfg, attn, return_aux=True)
    np.testing.assert_array_equal(aux["k"], 2)


# --------------------------------------------------------------------- SDSA
def test_sdsa_zero_value_path(rng):
    cfg, attn = make_attn(channels=8, heads=2, ratio=Fraction(1, 2))
    attn.qkv_pw.weight.data[8:] = 0.0
    attn.qkv_pw.bias.data[8:] = 0.0
    attn.qkv_dw.bias.data[8:] = 0.0
    out = sdsa_forward(Tensor(rng.normal(size=(1, 4, 3, 3))), attn)
    np.testing.assert_array_equal(out.data, 0.0)


def test_sdsa_singleton_head_returns_value(rng):
    cfg, attn = make_attn(channels=4, heads=1, ratio=Fraction(1, 4))
    assert cfg.head_dim == 1
    x = Tensor(rng.normal(size=(1, 1, 3, 3)))
    out, aux = sdsa_forward(x, attn, return_aux=True)
    np.testing.assert_array_equal(aux["attn"].data, 1.0)
    v = attn.qkv_dw(attn.qkv_pw(x)).data[:, 2:3]
    np.testing.assert_allclose(out.data, v, rtol=1e-12)


def test_sdsa_rows_are_stochastic(rng):
    cfg, attn = make_attn(channels=16, heads=2, ratio=Fraction(1, 2))
    _, aux = sdsa_forward(Tensor(rng.normal(size=(2, 8, 4, 4))), attn, return_aux=True)
    np.testing.assert_allclose(aux["attn"].data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- invariants
@pytest.mark.parametrize("mask_mode", ["neg_inf", "zero_pre_softmax"])
def test_each_row_keeps_exactly_k(rng, mask_mode):
    cfg, attn = make_attn(channels=32, heads=2, ratio=Fraction(1, 2), mask_mode=mask_mode)
    for bias in (-2.0, 0.0, 1.0):
        _set_gate(attn, bias)
        _, aux = atk_spa_forward(Tensor(rng.normal(size=(2, 32, 4, 4))), cfg, attn, return_aux=True)
        for n in range(2):
            k = aux["k"][n]
            assert np.all(aux["mask"][n].sum(axis=-1) == k)
            if mask_mode == "neg_inf":
                assert np.all((aux["attn"].data[n] > 0).sum(axis=-1) == k)


def test_sparse_dense_equivalence_with_fraction_one(rng):
    cfg, attn = make_attn(channels=16, heads=4, ratio=Fraction(1, 1), dtype=np.float32,
                          topk_mode="fixed", fixed_k_fraction=1)
    x = Tensor(rng.normal(size=(2, 16, 6, 6)).astype(np.float32))
    _, aux = atk_spa_forward(x, cfg, attn, return_aux=True)
    dense = sdsa_forward(split_partial(x, cfg)[0], attn)
    assert np.abs(aux["attn_out"].data - dense.data).max() < 1e-6


def test_gradient_sparsity_and_restricted_dense_gradient(rng):
    cfg, attn = make_attn(channels=8, heads=2, ratio=Fraction(1, 1))
    assert cfg.head_dim == 4
    x = Tensor(rng.normal(size=(1, 8, 3, 3)))
    w = Tensor(rng.normal(size=(1, 8, 3, 3)))
    out, aux = atk_spa_forward(x, cfg, attn, k=2, return_aux=True)
    scores = aux["scores"].retain_grad()
    sum_all(mul(out, w)).backward()
    grad = scores.grad
    keep = aux["mask"].astype(bool)
    assert np.all(grad[~keep] == 0.0)

    # loss as a function of the scores alone, with the selection held fixed
    v = attn.qkv_dw(attn.qkv_pw(x)).data[:, 16:].reshape(1, 2, 4, 9)
    m = Tensor(scores.data.copy(), requires_grad=True)

    def loss():
        att = F.softmax_rows(masked_fill(m, keep, -np.inf))
        ctx = matmul(att, Tensor(v)).reshape(1, 8, 3, 3)
        return sum_all(mul(attn.proj(ctx), w))

    from fraesormer.gradcheck import numerical_gradient
    fd = numerical_gradient(loss, m)
    np.testing.assert_allclose(grad[keep], fd[keep], rtol=1e-6, atol=1e-9)


def test_gate_gets_no_task_gradient(rng):
    cfg, attn = make_attn(channels=16, heads=2, ratio=Fraction(1, 2))
    x = Tensor(rng.normal(size=(1, 16, 4, 4)), requires_grad=True)
    sum_all(mul(atk_spa_forward(x, cfg, attn), Tensor(rng.normal(size=(1, 16, 4, 4))))).backward()
    assert attn.gate.proj.weight.grad is None and attn.gate.proj.bias.grad is None
    assert attn.qkv_pw.weight.grad is not None


@pytest.mark.parametrize("res", [8, 32, 64])
def test_score_allocation_is_resolution_independent(rng, res):
    cfg, attn = make_attn(channels=16, heads=2, ratio=Fraction(1, 2), dtype=np.float32)
    _, aux = atk_spa_forward(Tensor(rng.normal(size=(1, 16, res, res)).astype(np.float32)), cfg, attn, return_aux=True)
    assert aux["scores"].shape == (1, cfg.heads, cfg.head_dim, cfg.head_dim)
    assert aux["attn"].data.nbytes == cfg.heads * cfg.head_dim**2 * 4
