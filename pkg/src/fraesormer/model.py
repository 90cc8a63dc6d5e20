"""Four-stage hierarchical Fraesormer backbone."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import functional as F
from .attention import ATKSPA, AttentionConfig, as_fraction
from .errors import ConfigError, DimensionError
from .ffn import HSSFGN, HssfgnConfig
from .nn import Conv2d, LayerNorm2d, Linear, Module
from .tensor import Tensor, add, global_avg_pool

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_classes: int
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    in_channels: int = 3
    partial_ratio: Fraction = Fraction(1, 4)
    ffn_expansion: Fraction = Fraction(2)
    mask_mode: str = "neg_inf"
    topk_mode: str = "gdtko"
    fixed_k_fraction: Fraction = Fraction(1)

    def __post_init__(self):
        for name in ("dims", "depths", "heads"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} must have 4 entries, got {len(value)}")
            object.__setattr__(self, name, value)
        for name in ("partial_ratio", "ffn_expansion", "fixed_k_fraction"):
            object.__setattr__(self, name, as_fraction(getattr(self, name)))
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be ≥ 1")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"every stage needs ≥1 block, got depths {self.depths}")
        if self.dims[0] % 2:
            raise ConfigError("dims[0] must be even (the stem halves it)")
        # delegate the per-stage checks to the sub-configs
        for i in range(4):
            self.attention_config(i)
            HssfgnConfig(self.dims[i], self.ffn_expansion)

    def attention_config(self, stage: int) -> AttentionConfig:
        return AttentionConfig(
            channels=self.dims[stage],
            heads=self.heads[stage],
            partial_ratio=self.partial_ratio,
            mask_mode=self.mask_mode,
            topk_mode=self.topk_mode,
            fixed_k_fraction=self.fixed_k_fraction,
        )

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Fraction):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        missing = sorted(known - set(data))
        if missing:
            raise ConfigError(f"missing config fields: {', '.join(missing)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> ModelConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


TINY = ModelConfig("tiny", 101, dims=(40, 80, 160, 320), depths=(2, 2, 6, 2), heads=(1, 2, 4, 8))
BASE = ModelConfig("base", 101, dims=(64, 128, 256, 512), depths=(2, 2, 6, 2), heads=(2, 4, 8, 16))
LARGE = ModelConfig("large", 101, dims=(64, 128, 256, 512), depths=(3, 3, 9, 3), heads=(2, 4, 8, 16))
MICRO = ModelConfig("micro", 4, dims=(8, 16, 24, 32), depths=(1, 1, 1, 1), heads=(1, 1, 1, 1))

NAMED_CONFIGS = {c.name: c for c in (TINY, BASE, LARGE, MICRO)}


# ---------------------------------------------------------------------- layers
class Stem(Module):
    """Two 3x3 stride-2 convs, each followed by LayerNorm and GELU (total stride 4)."""

    def __init__(self, cin: int, dim: int, dtype=np.float32):
        self.conv1 = Conv2d(cin, dim // 2, 3, stride=2, padding=1, dtype=dtype)
        self.norm1 = LayerNorm2d(dim // 2, dtype=dtype)
        self.conv2 = Conv2d(dim // 2, dim, 3, stride=2, padding=1, dtype=dtype)
        self.norm2 = LayerNorm2d(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(self.norm2(self.conv2(x)))


class Merge(Module):
    """3x3 stride-2 conv then LayerNorm."""

    def __init__(self, cin: int, cout: int, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, stride=2, padding=1, dtype=dtype)
        self.norm = LayerNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


class FraesormerBlock(Module):
    def __init__(self, attn_cfg: AttentionConfig, ffn_cfg: HssfgnConfig, dtype=np.float32):
        dim = attn_cfg.channels
        self.cpe = Conv2d(dim, dim, 3, groups=dim, dtype=dtype)
        self.norm1 = LayerNorm2d(dim, dtype=dtype)
        self.attn = ATKSPA(attn_cfg, dtype=dtype)
        self.norm2 = LayerNorm2d(dim, dtype=dtype)
        self.ffn = HSSFGN(ffn_cfg, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return block_forward(x, self)


class Stage(Module):
    def __init__(self, downsample: Module, blocks: list[FraesormerBlock]):
        self.downsample = downsample
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Fraesormer(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        stages = []
        for i in range(4):
            if i == 0:
                down = Stem(cfg.in_channels, cfg.dims[0], dtype=dtype)
            else:
                down = Merge(cfg.dims[i - 1], cfg.dims[i], dtype=dtype)
            attn_cfg = cfg.attention_config(i)
            ffn_cfg = HssfgnConfig(cfg.dims[i], cfg.ffn_expansion)
            blocks = [FraesormerBlock(attn_cfg, ffn_cfg, dtype=dtype) for _ in range(cfg.depths[i])]
            stages.append(Stage(down, blocks))
        self.stages = stages
        self.head = Linear(cfg.dims[3], cfg.num_classes, dtype=dtype)
        self.assign_paths()

    def forward(self, x: Tensor) -> Tensor:
        return model_forward(x, self)

    def features(self, x: Tensor) -> list[Tensor]:
        """Per-stage output feature maps."""
        check_resolution(x.shape)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def attention_modules(self) -> list[ATKSPA]:
        return [m for _, m in self.named_modules() if isinstance(m, ATKSPA)]


# ------------------------------------------------------------------ operations
def block_forward(x: Tensor, block: FraesormerBlock) -> Tensor:
    """CPE residual, then pre-norm ATK-SPA and HSSFGN, each with one residual."""
    if x.ndim != 4 or x.shape[1] != block.attn.cfg.channels:
        raise DimensionError(f"block expects {block.attn.cfg.channels} channels, got shape {x.shape}")
    x = add(x, block.cpe(x))
    x = add(x, block.attn(block.norm1(x)))
    return add(x, block.ffn(block.norm2(x)))


def merge_layer_forward(x: Tensor, stage_index: int, model: Fraesormer) -> Tensor:
    if stage_index not in range(4):
        raise ConfigError(f"stage_index must be in 0..3, got {stage_index}")
    stride = 4 if stage_index == 0 else 2
    if x.ndim != 4 or x.shape[2] < stride or x.shape[3] < stride:
        raise DimensionError(f"resolution {x.shape[2:]} is smaller than the stride {stride}")
    return model.stages[stage_index].downsample(x)


def check_resolution(shape) -> None:
    if len(shape) != 4:
        raise DimensionError(f"expected NCHW input, got {shape}")
    h, w = shape[2], shape[3]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise DimensionError(f"input resolution {h}x{w} must be ≥32 and divisible by 32")


def model_forward(x: Tensor, model: Fraesormer) -> Tensor:
    if x.shape[1] != model.cfg.in_channels:
        raise DimensionError(f"expected {model.cfg.in_channels} input channels, got {x.shape[1]}")
    feats = model.features(x)
    return model.head(global_avg_pool(feats[-1]))


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples truncated to ±bound·std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Fraesormer:
    """Construct and deterministically initialise a model from ``seed``."""
    model = Fraesormer(cfg, dtype=dtype)
    rng = np.random.default_rng(seed)
    for _, mod in model.named_modules():
        if isinstance(mod, (Conv2d, Linear)):
            mod.weight.data = trunc_normal(rng, mod.weight.shape).astype(dtype)
            if mod.bias is not None:
                mod.bias.data = np.zeros_like(mod.bias.data)
        elif isinstance(mod, LayerNorm2d):
            mod.weight.data = np.ones_like(mod.weight.data)
            mod.bias.data = np.zeros_like(mod.bias.data)
        elif isinstance(mod, ATKSPA):
            mod.rel_bias.data = np.zeros_like(mod.rel_bias.data)
    return model
