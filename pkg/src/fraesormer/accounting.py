"""Parameter and multiply-accumulate (MAC) accounting.

Counts come from closed-form expressions over layer shapes, never from the
parameter arrays themselves, so they can be cross-checked against a plain
sum over the parameter registry.

MAC conventions: a convolution costs k²·(Cin/groups)·Cout per output
position; each attention head costs d²·HW for QKᵀ and d²·HW for attn·V; a
linear layer costs Cin·Cout per position. Normalisation, activations,
softmax, pooling and top-k masking are counted as 0 MACs, as is usual in
published MAC tables.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .attention import ATKSPA
from .errors import DimensionError
from .ffn import HSSFGN
from .model import Fraesormer, FraesormerBlock, Merge, Stem
from .nn import Conv2d, LayerNorm2d, Linear

HEADER_NOTE = "# MACs: conv/matmul/linear only; norm, activation, softmax, pooling, masking = 0"


@dataclass(frozen=True)
class Row:
    path: str
    kind: str
    params: int
    macs: int


@dataclass
class AccountingReport:
    rows: list[Row] = field(default_factory=list)
    resolution: int | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def by_kind(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            p, m = out.get(r.kind, (0, 0))
            out[r.kind] = (p + r.params, m + r.macs)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "kind", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.path, r.kind, r.params, r.macs])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("path")] + [len(r.path) for r in self.rows])
        kw = max([len("kind")] + [len(r.kind) for r in self.rows])
        res = "n/a" if self.resolution is None else f"{self.resolution}x{self.resolution}"
        lines = [HEADER_NOTE, f"# input resolution: {res}",
                 f"{'path':<{width}}  {'kind':<{kw}}  {'params':>12}  {'macs':>15}"]
        for r in self.rows:
            lines.append(f"{r.path:<{width}}  {r.kind:<{kw}}  {r.params:>12,}  {r.macs:>15,}")
        lines.append(f"{'TOTAL':<{width}}  {'':<{kw}}  {self.total_params:>12,}  {self.total_macs:>15,}")
        lines.append(f"# params: {self.total_params / 1e6:.3f} M   MACs: {self.total_macs / 1e9:.3f} G")
        return "\n".join(lines)


# ------------------------------------------------------------------ closed forms
def conv_params(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return k * k * cin * cout // groups + (cout if bias else 0)


def conv_macs(cin: int, cout: int, k: int, groups: int, hout: int, wout: int) -> int:
    return k * k * (cin // groups) * cout * hout * wout


def conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_kind(conv: Conv2d) -> str:
    if conv.kernel == 1 and conv.groups == 1:
        return "pointwise_conv"
    if conv.groups == conv.in_channels == conv.out_channels:
        return "depthwise_conv"
    return "conv"


class _Walker:
    def __init__(self, resolution: int | None):
        self.resolution = resolution
        self.rows: list[Row] = []

    def emit(self, path, kind, params, macs=0):
        self.rows.append(Row(path, kind, int(params), int(macs) if self.resolution else 0))

    def conv(self, path: str, conv: Conv2d, hw: tuple[int, int]) -> tuple[int, int]:
        ho = conv_out(hw[0], conv.kernel, conv.stride, conv.padding)
        wo = conv_out(hw[1], conv.kernel, conv.stride, conv.padding)
        self.emit(
            path, _conv_kind(conv),
            conv_params(conv.in_channels, conv.out_channels, conv.kernel, conv.groups, conv.bias is not None),
            conv_macs(conv.in_channels, conv.out_channels, conv.kernel, conv.groups, ho, wo),
        )
        return ho, wo

    def norm(self, path: str, ln: LayerNorm2d) -> None:
        self.emit(path, "layer_norm", 2 * ln.channels)

    def attention(self, path: str, attn: ATKSPA, hw) -> None:
        cfg = attn.cfg
        h, d, pos = cfg.heads, cfg.head_dim, hw[0] * hw[1]
        self.conv(f"{path}.qkv_pw", attn.qkv_pw, hw)
        self.conv(f"{path}.qkv_dw", attn.qkv_dw, hw)
        self.conv(f"{path}.gate.proj", attn.gate.proj, hw)
        self.emit(f"{path}.rel_bias", "rel_pos_bias", h * d * d)
        self.emit(f"{path}.scores", "attn_qk", 0, h * d * d * pos)
        self.emit(f"{path}.context", "attn_v", 0, h * d * d * pos)
        self.conv(f"{path}.proj", attn.proj, hw)

    def ffn(self, path: str, ffn: HSSFGN, hw) -> None:
        self.conv(f"{path}.proj_in", ffn.proj_in, hw)
        for i, conv in enumerate(ffn.dw):
            self.conv(f"{path}.dw.{i}", conv, hw)
        self.conv(f"{path}.proj_out", ffn.proj_out, hw)

    def block(self, path: str, blk: FraesormerBlock, hw) -> None:
        self.conv(f"{path}.cpe", blk.cpe, hw)
        self.norm(f"{path}.norm1", blk.norm1)
        self.attention(f"{path}.attn", blk.attn, hw)
        self.norm(f"{path}.norm2", blk.norm2)
        self.ffn(f"{path}.ffn", blk.ffn, hw)

    def linear(self, path: str, lin: Linear, positions: int = 1) -> None:
        cin, cout = lin.in_features, lin.out_features
        self.emit(path, "linear", cin * cout + cout, cin * cout * positions)

    def model(self, model: Fraesormer) -> None:
        res = self.resolution or 32
        hw = (res, res)
        for i, stage in enumerate(model.stages):
            prefix = f"stages.{i}.downsample"
            down = stage.downsample
            if isinstance(down, Stem):
                hw = self.conv(f"{prefix}.conv1", down.conv1, hw)
                self.norm(f"{prefix}.norm1", down.norm1)
                hw = self.conv(f"{prefix}.conv2", down.conv2, hw)
                self.norm(f"{prefix}.norm2", down.norm2)
            elif isinstance(down, Merge):
                hw = self.conv(f"{prefix}.conv", down.conv, hw)
                self.norm(f"{prefix}.norm", down.norm)
            for j, blk in enumerate(stage.blocks):
                self.block(f"stages.{i}.blocks.{j}", blk, hw)
        self.linear("head", model.head)


def count_params(model: Fraesormer) -> AccountingReport:
    walker = _Walker(None)
    walker.model(model)
    return AccountingReport(walker.rows, None)


def count_macs(model: Fraesormer, resolution: int) -> AccountingReport:
    if resolution < 32 or resolution % 32:
        raise DimensionError(f"resolution must be a positive multiple of 32, got {resolution}")
    walker = _Walker(resolution)
    walker.model(model)
    return AccountingReport(walker.rows, resolution)


def registry_param_count(model) -> int:
    """Brute-force element count over the parameter registry."""
    return sum(p.data.size for p in model.parameters())
