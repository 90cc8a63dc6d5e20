"""Registry of finite-difference gradient checks, shared by the tests and the CLI."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .attention import ATKSPA, AttentionConfig, atk_spa_forward
from .ffn import HSSFGN, HssfgnConfig
from .gradcheck import backward_gradcheck
from .model import FraesormerBlock, ModelConfig, build_model
from .nn import Module
from .tensor import (
    Tensor, add, concat_channels, global_avg_pool, masked_fill, matmul, mean_all, mul,
    reshape, split_channels, sum_all, transpose,
)

# case(rng) -> (scalar function, inputs, max_checks per input or None)
Case = Callable[[np.random.Generator], tuple]

OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

MICRO_GRADCHECK = ModelConfig("micro", 4, dims=(8, 16, 24, 32), depths=(1, 1, 1, 1), heads=(1, 1, 1, 1))


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _weighted(out_fn, rng, shape):
    # random projection keeps every gradient entry O(1)
    w = Tensor(rng.normal(size=shape))
    return lambda: sum_all(mul(out_fn(), w))


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape).astype(np.float64)


def _conv(groups, stride, padding, k=3):
    def case(rng):
        c = 4
        out_c = 6 if groups == 1 else c
        x = _leaf(rng, 2, c, 6, 5)
        w = _leaf(rng, out_c, c // groups, k, k)
        b = _leaf(rng, out_c)
        shape = F.conv2d(x, w, b, stride, padding, groups).shape
        return _weighted(lambda: F.conv2d(x, w, b, stride, padding, groups), rng, shape), [x, w, b], None
    return case


def _pointwise(rng):
    x, w, b = _leaf(rng, 2, 5, 3, 3), _leaf(rng, 4, 5, 1, 1), _leaf(rng, 4)
    return _weighted(lambda: F.conv2d(x, w, b), rng, (2, 4, 3, 3)), [x, w, b], None


def _matmul(rng):
    a, b, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return _weighted(lambda: matmul(a, b, bias), rng, (2, 3, 5)), [a, b, bias], None


def _linear(rng):
    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 2, 4), _leaf(rng, 2)
    return _weighted(lambda: F.linear(x, w, b), rng, (3, 2)), [x, w, b], None


def _softmax(rng):
    x = _leaf(rng, 3, 6)
    return _weighted(lambda: F.softmax_rows(x), rng, (3, 6)), [x], None


def _masked_softmax(rng):
    x = _leaf(rng, 3, 6)
    keep = rng.random((3, 6)) < 0.6
    keep[:, 0] = True
    return _weighted(lambda: F.softmax_rows(masked_fill(x, keep, -np.inf)), rng, (3, 6)), [x], None


def _layer_norm(rng):
    x, g, b = _leaf(rng, 2, 5, 3, 3), _leaf(rng, 5), _leaf(rng, 5)
    return _weighted(lambda: F.layer_norm_channels(x, g, b), rng, x.shape), [x, g, b], None


def _unary(fn):
    def case(rng):
        # unit scale keeps inputs out of the far tails, where gradients sink to FD roundoff
        x = _leaf(rng, 4, 5)
        return _weighted(lambda: fn(x), rng, x.shape), [x], None
    return case


def _mean_all(rng):
    x = _leaf(rng, 3, 4)
    return lambda: mul(mean_all(x), mean_all(x)), [x], None


def _gap(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    return _weighted(lambda: global_avg_pool(x), rng, (2, 3)), [x], None


def _add_mul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)
    return _weighted(lambda: mul(add(a, b), a), rng, (2, 3, 4)), [a, b], None


def _split_concat(rng):
    x = _leaf(rng, 2, 6, 3, 3)
    def f():
        a, b, c = split_channels(x, [1, 2, 3])
        return concat_channels([mul(c, c), a, b])
    return _weighted(f, rng, x.shape), [x], None


def _reshape_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    return _weighted(lambda: transpose(reshape(x, (6, 4)), (1, 0)), rng, (4, 6)), [x], None


def _cross_entropy(rng):
    x = _leaf(rng, 4, 5)
    targets = rng.integers(0, 5, size=4)
    return lambda: F.cross_entropy(x, targets), [x], None


def _attention(mask_mode, topk_mode):
    def case(rng):
        cfg = AttentionConfig(16, heads=2, partial_ratio=0.5, mask_mode=mask_mode,
                              topk_mode=topk_mode, fixed_k_fraction=0.5)
        attn = ATKSPA(cfg, dtype=np.float64)
        randomize(attn, rng)
        x = _leaf(rng, 1, 16, 4, 4)
        params = [x] + attn.parameters()
        return _weighted(lambda: atk_spa_forward(x, cfg, attn), rng, x.shape), params, None
    return case


def _hssfgn(rng):
    cfg = HssfgnConfig(8, 2)
    ffn = HSSFGN(cfg, dtype=np.float64)
    randomize(ffn, rng)
    x = _leaf(rng, 1, 8, 6, 6)
    return _weighted(lambda: ffn(x), rng, x.shape), [x] + ffn.parameters(), None


def block_case(rng):
    """Cross-entropy of one block (GAP over channels as logits) on a 1x16x8x8 input."""
    cfg = MICRO_GRADCHECK.replace(dims=(16, 16, 24, 32))
    block = FraesormerBlock(cfg.attention_config(0), HssfgnConfig(16, 2), dtype=np.float64)
    randomize(block, rng)
    x = _leaf(rng, 1, 16, 8, 8)
    target = [int(rng.integers(0, 16))]
    return lambda: F.cross_entropy(global_avg_pool(block(x)), target), [x] + block.parameters(), None


def model_case(rng):
    """End-to-end cross-entropy of the micro model; a few entries per tensor are probed."""
    model = build_model(MICRO_GRADCHECK, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    randomize(model, rng, scale=0.2)
    x = Tensor(rng.random((2, 3, 32, 32)))
    targets = rng.integers(0, 4, size=2)
    return lambda: F.cross_entropy(model(x), targets), model.parameters(), 3


OP_CASES: dict[str, Case] = {
    "conv2d_dense_s1_p1": _conv(1, 1, 1),
    "conv2d_dense_s2_p0": _conv(1, 2, 0),
    "conv2d_depthwise_s1_p1": _conv(4, 1, 1),
    "conv2d_depthwise_s2_p1": _conv(4, 2, 1),
    "conv2d_depthwise_k7": _conv(4, 1, 3, k=7),
    "conv2d_grouped": _conv(2, 1, 1),
    "conv2d_pointwise": _pointwise,
    "matmul": _matmul,
    "linear": _linear,
    "softmax_rows": _softmax,
    "softmax_masked": _masked_softmax,
    "layer_norm_channels": _layer_norm,
    "gelu": _unary(F.gelu),
    "sigmoid": _unary(F.sigmoid),
    "mean_all": _mean_all,
    "global_avg_pool": _gap,
    "add_mul": _add_mul,
    "split_concat": _split_concat,
    "reshape_transpose": _reshape_transpose,
    "cross_entropy": _cross_entropy,
    "atk_spa_gdtko_neg_inf": _attention("neg_inf", "gdtko"),
    "atk_spa_fixed_zero_fill": _attention("zero_pre_softmax", "fixed"),
    "hssfgn": _hssfgn,
}


def run_case(case: Case, seed: int) -> float:
    rng = np.random.default_rng(seed)
    f, inputs, max_checks = case(rng)
    return backward_gradcheck(f, inputs, max_checks=max_checks, rng=rng)


def run_suite(seed: int = 0, op_seeds: int = 10):
    """Yield ``(name, max_rel_err, tolerance)`` for every registered check."""
    for name, case in OP_CASES.items():
        worst = max(run_case(case, seed * 1000 + s) for s in range(op_seeds))
        yield name, worst, OP_TOLERANCE
    yield "fraesormer_block", run_case(block_case, seed), BLOCK_TOLERANCE
    yield "micro_model_end_to_end", run_case(model_case, seed), MODEL_TOLERANCE
