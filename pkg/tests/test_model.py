import json

import numpy as np
import pytest

import oracles
from fraesormer.accounting import count_params
from fraesormer.errors import ConfigError, DimensionError, NonFiniteError
from fraesormer.ffn import HssfgnConfig
from fraesormer.gradsuite import randomize
from fraesormer.model import (
    MICRO, NAMED_CONFIGS, TINY, FraesormerBlock, ModelConfig, block_forward, build_model,
    merge_layer_forward, trunc_normal,
)
from fraesormer.nn import nonfinite_probe
from fraesormer.tensor import Tensor, no_grad


def make_block(dim=16, heads=1, seed=0):
    cfg = MICRO.replace(dims=(dim, 16, 24, 32), heads=(heads, 1, 1, 1))
    blk = FraesormerBlock(cfg.attention_config(0), HssfgnConfig(dim, 2), dtype=np.float64)
    randomize(blk, np.random.default_rng(seed), scale=0.3)
    return blk


def zero_branches(blk):
    for conv in (blk.cpe, blk.attn.proj, blk.ffn.proj_out):
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0


# -------------------------------------------------------------------- blocks
def test_zeroed_branches_make_block_identity(rng):
    blk = make_block()
    zero_branches(blk)
    x = rng.normal(size=(2, 16, 8, 8))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("dim", [16, 32])
@pytest.mark.parametrize("res", [8, 16])
def test_block_preserves_shape(rng, dim, res):
    blk = make_block(dim, heads=2)
    assert blk(Tensor(rng.normal(size=(1, dim, res, res)))).shape == (1, dim, res, res)


def test_block_composition_oracle(rng):
    blk = make_block(seed=4)
    x = rng.normal(size=(1, 16, 8, 8))
    x1 = x + oracles.conv2d_naive(x, blk.cpe.weight.data, blk.cpe.bias.data, padding=1, groups=16)
    ln1 = oracles.layer_norm_naive(x1, blk.norm1.weight.data, blk.norm1.bias.data)
    x2 = x1 + blk.attn(Tensor(ln1)).data
    ln2 = oracles.layer_norm_naive(x2, blk.norm2.weight.data, blk.norm2.bias.data)
    ref = x2 + blk.ffn(Tensor(ln2)).data
    np.testing.assert_allclose(block_forward(Tensor(x), blk).data, ref, rtol=1e-5, atol=1e-10)


def test_block_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        make_block()(Tensor(np.zeros((1, 8, 4, 4))))


# ---------------------------------------------------------- stages and model
@pytest.mark.parametrize("res,sizes", [(224, [56, 28, 14, 7]), (64, [16, 8, 4, 2])])
def test_stage_resolutions(res, sizes):
    model = build_model(MICRO, seed=0)
    with no_grad():
        feats = model.features(Tensor(np.zeros((1, 3, res, res), np.float32)))
    assert [f.shape[2] for f in feats] == sizes
    assert [f.shape[3] for f in feats] == sizes
    assert [f.shape[1] for f in feats] == list(MICRO.dims)


def test_tiny_channel_progression():
    assert TINY.dims == (40, 80, 160, 320)
    model = build_model(TINY, seed=0)
    assert [s.downsample.norm.channels for s in model.stages[1:]] == [80, 160, 320]
    assert model.stages[0].downsample.norm2.channels == 40


def test_tiny_head_dim_is_constant():
    assert [TINY.attention_config(i).head_dim for i in range(4)] == [10, 10, 10, 10]


def test_merge_layer_errors():
    model = build_model(MICRO, seed=0)
    with pytest.raises(ConfigError):
        merge_layer_forward(Tensor(np.zeros((1, 3, 8, 8))), 4, model)
    with pytest.raises(DimensionError):
        merge_layer_forward(Tensor(np.zeros((1, 3, 2, 2))), 0, model)
    out = merge_layer_forward(Tensor(np.zeros((1, 8, 8, 8), np.float32)), 1, model)
    assert out.shape == (1, 16, 4, 4)


def test_logits_shape_determinism_and_softmax(rng):
    x = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
    a = build_model(MICRO, seed=3)(x).data
    b = build_model(MICRO, seed=3)(x).data
    assert a.shape == (2, 4)
    assert a.tobytes() == b.tobytes()
    p = np.exp(a - a.max(axis=1, keepdims=True))
    np.testing.assert_allclose((p / p.sum(axis=1, keepdims=True)).sum(axis=1), 1.0, rtol=1e-6)


@pytest.mark.parametrize("res", [48, 16, 65])
def test_bad_resolution(res):
    with pytest.raises(DimensionError):
        build_model(MICRO, seed=0)(Tensor(np.zeros((1, 3, res, res), np.float32)))


# ---------------------------------------------------------------- build_model
def test_build_is_deterministic_and_seed_sensitive():
    a = [p.data.tobytes() for p in build_model(MICRO, seed=11).parameters()]
    b = [p.data.tobytes() for p in build_model(MICRO, seed=11).parameters()]
    c = [p.data.tobytes() for p in build_model(MICRO, seed=12).parameters()]
    assert a == b and a != c


def test_init_scheme():
    model = build_model(MICRO, seed=0)
    for name, p in model.named_parameters():
        if name.endswith("rel_bias"):
            assert not p.data.any()
        elif ".norm" in name and name.endswith("weight"):
            assert np.all(p.data == 1.0)
        elif name.endswith("bias"):
            assert not p.data.any()
        else:
            assert np.abs(p.data).max() <= 0.04 + 1e-7


def test_trunc_normal_moments(rng):
    s = trunc_normal(rng, (200_000,))
    assert np.abs(s).max() <= 0.04
    # std of a ±2σ truncated normal is 0.8796σ
    assert abs(s.std() - 0.02 * 0.8796) < 2e-4


def test_tiny_parameter_names_unique_and_count_in_band():
    model = build_model(TINY, seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    total = count_params(model).total_params
    assert abs(total - 2_560_000) <= 0.2 * 2_560_000


def test_weight_surgery_reduces_trunk_to_merges(rng):
    model = build_model(MICRO, seed=1)
    for stage in model.stages:
        for blk in stage.blocks:
            zero_branches(blk)
    x = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    feats = model.features(x)
    y = x
    for i in range(4):
        y = merge_layer_forward(y, i, model)
        np.testing.assert_array_equal(feats[i].data, y.data)


def test_tiny_forward_is_finite_and_attention_is_small(rng):
    model = build_model(TINY, seed=0)
    x = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    with no_grad(), nonfinite_probe():
        logits = model(x)
    assert np.all(np.isfinite(logits.data))
    for attn in model.attention_modules():
        assert attn.rel_bias.shape == (attn.cfg.heads, attn.cfg.head_dim, attn.cfg.head_dim)


def test_nonfinite_probe_names_layer(rng):
    model = build_model(MICRO, seed=0)
    model.stages[1].blocks[0].ffn.proj_out.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError) as info, no_grad(), nonfinite_probe():
        model(Tensor(rng.random((1, 3, 32, 32)).astype(np.float32)))
    assert info.value.layer == "stages.1.blocks.0.ffn.proj_out"


# -------------------------------------------------------------- config files
def test_config_json_round_trip(tmp_path):
    for cfg in NAMED_CONFIGS.values():
        path = tmp_path / f"{cfg.name}.json"
        cfg.dump(path)
        assert ModelConfig.load(path) == cfg


def test_config_rejects_unknown_and_missing_fields(tmp_path):
    data = MICRO.to_dict()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**data, "dropout": 0.1})
    del data["dims"]
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(data)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ModelConfig.load(bad)


def test_config_invariants():
    with pytest.raises(ConfigError):
        MICRO.replace(heads=(3, 1, 1, 1))
    with pytest.raises(ConfigError):
        MICRO.replace(depths=(0, 1, 1, 1))


def test_shipped_config_files_match_named_configs():
    from pathlib import Path
    root = Path(__file__).resolve().parent.parent / "configs"
    for name, cfg in NAMED_CONFIGS.items():
        assert ModelConfig.from_dict(json.loads((root / f"{name}.json").read_text())) == cfg
