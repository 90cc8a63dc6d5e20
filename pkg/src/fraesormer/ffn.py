"""Hierarchical scale-sensitive feature gating network (HSSFGN)."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import functional as F
from .attention import as_fraction
from .errors import ConfigError
from .nn import Conv2d, Module
from .tensor import Tensor, concat_channels, mul, split_channels

KERNEL_SIZES = (1, 3, 5, 7)


@dataclass(frozen=True)
class HssfgnConfig:
    channels: int
    expansion: Fraction = Fraction(2)

    def __post_init__(self):
        object.__setattr__(self, "expansion", as_fraction(self.expansion))
        hidden = self.channels * self.expansion
        if hidden.denominator != 1 or hidden <= 0 or int(hidden) % len(KERNEL_SIZES):
            raise ConfigError(
                f"hidden dim {hidden} (= {self.channels}·{self.expansion}) must be a positive multiple of 4"
            )

    @property
    def hidden(self) -> int:
        return int(self.channels * self.expansion)


class HSSFGN(Module):
    def __init__(self, cfg: HssfgnConfig, dtype=np.float32):
        self.cfg = cfg
        hid, group = cfg.hidden, cfg.hidden // len(KERNEL_SIZES)
        self.proj_in = Conv2d(cfg.channels, hid, 1, dtype=dtype)
        self.dw = [Conv2d(group, group, k, groups=group, dtype=dtype) for k in KERNEL_SIZES]
        self.proj_out = Conv2d(hid, cfg.channels, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return hssfgn_forward(x, self.cfg, self)


def multiscale_gate_branch(x_g: Tensor, weights: HSSFGN) -> Tensor:
    """Four equal channel groups through 1/3/5/7 depthwise convs, then GELU."""
    hid = x_g.shape[1]
    if hid % len(KERNEL_SIZES):
        raise ConfigError(f"gate width {hid} is not divisible by {len(KERNEL_SIZES)}")
    groups = split_channels(x_g, [hid // len(KERNEL_SIZES)] * len(KERNEL_SIZES))
    return F.gelu(concat_channels([conv(g) for conv, g in zip(weights.dw, groups)]))


def hssfgn_forward(x: Tensor, cfg: HssfgnConfig, weights: HSSFGN, gate_override=None) -> Tensor:
    """Gated FFN on a layer-normalised input. Returns the pre-residual value.

    ``gate_override`` replaces the gate branch output (test hook).
    """
    if x.shape[1] != cfg.channels:
        raise ConfigError(f"input has {x.shape[1]} channels, config expects {cfg.channels}")
    x_gv = weights.proj_in(x)  # shared by the gate and value paths
    gate = multiscale_gate_branch(x_gv, weights) if gate_override is None else gate_override
    return weights.proj_out(mul(x_gv, gate))
