"""Adaptive top-k sparse partial channel attention (ATK-SPA).

A fraction of the input channels goes through multi-head channel
("transposed") attention, whose d_head x d_head score rows are sparsified to
their top-k entries before the softmax; the remaining channels bypass the
attention and are re-joined before the output projection. The sparsity
level k is either a fixed fraction of d_head or chosen per sample by the
gated dynamic top-k operator (GDTKO).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError
from .nn import Conv2d, Module, Parameter
from .tensor import Tensor, concat_channels, masked_fill, matmul, mul, reshape, split_channels, transpose

MASK_MODES = ("neg_inf", "zero_pre_softmax")
TOPK_MODES = ("gdtko", "fixed")


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    try:
        return Fraction(value)
    except (TypeError, ValueError, ZeroDivisionError):
        raise ConfigError(f"not a rational number: {value!r}") from None


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    partial_ratio: Fraction = Fraction(1, 4)
    mask_mode: str = "neg_inf"
    topk_mode: str = "gdtko"
    fixed_k_fraction: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "partial_ratio", as_fraction(self.partial_ratio))
        object.__setattr__(self, "fixed_k_fraction", as_fraction(self.fixed_k_fraction))
        if not 0 < self.partial_ratio <= 1:
            raise ConfigError(f"partial_ratio must lie in (0, 1], got {self.partial_ratio}")
        if not 0 < self.fixed_k_fraction <= 1:
            raise ConfigError(f"fixed_k_fraction must lie in (0, 1], got {self.fixed_k_fraction}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.topk_mode not in TOPK_MODES:
            raise ConfigError(f"topk_mode must be one of {TOPK_MODES}")
        if self.heads < 1:
            raise ConfigError("heads must be ≥ 1")
        c_att = self.attn_channels
        if c_att < self.heads or c_att % self.heads:
            raise ConfigError(
                f"attention channels {c_att} (= {self.channels}·{self.partial_ratio}) "
                f"must be ≥ heads and divisible by heads={self.heads}"
            )

    @property
    def attn_channels(self) -> int:
        return round(self.channels * self.partial_ratio)

    @property
    def bypass_channels(self) -> int:
        return self.channels - self.attn_channels

    @property
    def head_dim(self) -> int:
        return self.attn_channels // self.heads

    @property
    def temperature(self) -> float:
        return math.sqrt(self.head_dim)


@dataclass
class TopKMask:
    k: int
    mask: np.ndarray  # (..., d, d), values exactly 0 or 1


class GateUnit(Module):
    """1x1 conv to a single channel followed by a sigmoid."""

    def __init__(self, channels: int, dtype=np.float32):
        self.proj = Conv2d(channels, 1, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.sigmoid(self.proj(x))


class ATKSPA(Module):
    def __init__(self, cfg: AttentionConfig, dtype=np.float32):
        self.cfg = cfg
        ca, d = cfg.attn_channels, cfg.head_dim
        self.qkv_pw = Conv2d(ca, 3 * ca, 1, dtype=dtype)
        self.qkv_dw = Conv2d(3 * ca, 3 * ca, 3, groups=3 * ca, dtype=dtype)
        self.gate = GateUnit(ca, dtype=dtype)
        self.rel_bias = Parameter(np.zeros((cfg.heads, d, d), dtype=dtype))
        self.proj = Conv2d(cfg.channels, cfg.channels, 1, dtype=dtype)
        # swaps the sparse branch for the dense baseline (ablation switch)
        self.dense = False

    def forward(self, x: Tensor) -> Tensor:
        if self.dense:
            x_att, x_sup = split_partial(x, self.cfg)
            return self.proj(_join(sdsa_forward(x_att, self), x_sup))
        return atk_spa_forward(x, self.cfg, self)


# ------------------------------------------------------------------ operations
def split_partial(x: Tensor, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Channel split into the attention subset and the untouched bypass subset."""
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW input, got {x.shape}")
    if x.shape[1] != cfg.channels:
        raise ConfigError(f"input has {x.shape[1]} channels, config expects {cfg.channels}")
    x_att, x_sup = split_channels(x, [cfg.attn_channels, cfg.bypass_channels])
    return x_att, x_sup


def k_from_density(rho, d_head: int) -> np.ndarray:
    """k = clamp(round(rho * d_head), 1, d_head), rounding halves up."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.clip(np.floor(rho * d_head + 0.5), 1, d_head).astype(np.int64)


def gdtko_compute_k(x_att: Tensor, gate: GateUnit, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample k from the spatial mean of the one-channel gate map.

    Returns ``(k, rho)``, both of shape (N,). k is a discrete quantity and
    carries no gradient back into the gate.
    """
    g = gate(x_att)
    rho = g.data.reshape(g.shape[0], -1).mean(axis=1)
    if not np.all(np.isfinite(rho)):
        name = gate.path or "gate"
        raise NonFiniteError(f"non-finite gate density at '{name}'; k is undefined", layer=name)
    return k_from_density(rho, d_head), rho


def topk_mask_rowwise(scores, k: int) -> TopKMask:
    """Binary mask keeping the k largest entries of every row (last axis).

    Ties resolve to the lowest column index.
    """
    m = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    d = m.shape[-1]
    if not 1 <= k <= d:
        raise ContractError(f"k={k} outside [1, {d}]")
    order = np.argsort(-m, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(m.shape, dtype=np.uint8)
    np.put_along_axis(mask, order, 1, axis=-1)
    return TopKMask(k=int(k), mask=mask)


def _qkv(x_att: Tensor, weights: ATKSPA) -> tuple[Tensor, Tensor, Tensor]:
    cfg = weights.cfg
    n, ca, h, w = x_att.shape
    qkv = weights.qkv_dw(weights.qkv_pw(x_att))
    heads = [reshape(t, (n, cfg.heads, cfg.head_dim, h * w)) for t in split_channels(qkv, [ca] * 3)]
    return heads[0], heads[1], heads[2]


def _scores(q: Tensor, k: Tensor, weights: ATKSPA) -> Tensor:
    # (N, h, d, HW) x (N, h, HW, d) -> (N, h, d, d); never HW x HW
    s = matmul(q, transpose(k, (0, 1, 3, 2)))
    return mul(s, 1.0 / weights.cfg.temperature) + weights.rel_bias


def _merge_heads(out: Tensor, like: Tensor) -> Tensor:
    return reshape(out, like.shape)


def _join(att: Tensor, x_sup: Tensor) -> Tensor:
    return att if x_sup.shape[1] == 0 else concat_channels([att, x_sup])


def select_k(x_att: Tensor, cfg: AttentionConfig, weights: ATKSPA):
    n = x_att.shape[0]
    if cfg.topk_mode == "fixed":
        k = int(k_from_density(float(cfg.fixed_k_fraction), cfg.head_dim))
        return np.full(n, k, dtype=np.int64), None
    return gdtko_compute_k(x_att, weights.gate, cfg.head_dim)


def atk_spa_forward(x: Tensor, cfg: AttentionConfig, weights: ATKSPA, k=None, return_aux: bool = False):
    """Full ATK-SPA pass on a layer-normalised NCHW input.

    ``k`` overrides the configured selection (int or per-sample array).
    With ``return_aux`` the second return value holds the intermediate
    scores, mask, chosen k and the attention-branch output.
    """
    x_att, x_sup = split_partial(x, cfg)
    n = x.shape[0]
    q, kk, v = _qkv(x_att, weights)
    scores = _scores(q, kk, weights)

    rho = None
    if k is None:
        ks, rho = select_k(x_att, cfg, weights)
    else:
        ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    mask = np.stack([topk_mask_rowwise(scores.data[i], int(ks[i])).mask for i in range(n)])
    fill = -np.inf if cfg.mask_mode == "neg_inf" else 0.0
    masked = masked_fill(scores, mask.astype(bool), fill)
    attn = F.softmax_rows(masked)
    att_out = _merge_heads(matmul(attn, v), x_att)
    out = weights.proj(_join(att_out, x_sup))
    if not return_aux:
        return out
    aux = {
        "scores": scores, "mask": mask, "k": np.asarray(ks), "rho": rho,
        "attn": attn, "attn_out": att_out, "x_sup": x_sup,
    }
    return out, aux


def sdsa_forward(x_att: Tensor, weights: ATKSPA, return_aux: bool = False):
    """Dense channel attention on the attention subset, no top-k masking."""
    q, kk, v = _qkv(x_att, weights)
    scores = _scores(q, kk, weights)
    attn = F.softmax_rows(scores)
    out = _merge_heads(matmul(attn, v), x_att)
    if return_aux:
        return out, {"scores": scores, "attn": attn}
    return out
