"""Declarative tiny-CNN architecture family with exact parameter and MAC accounting.

A :class:`ModelGraph` is a flat, immutable description of every layer with its
shapes. Nothing here allocates weights; :mod:`tinydronet.nn` does that.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

BASE_CHANNELS = (32, 64, 128)
VALID_GAMMAS = (1, 2, 4, 8)
GRAPH_FORMAT = "tinydronet-graph"
GRAPH_VERSION = 1


class ConfigError(ValueError):
    """Raised for an invalid architecture configuration."""


class BlockKind(str, enum.Enum):
    RB = "RB"
    DP = "DP"
    IRLB = "IRLB"


class LayerKind(str, enum.Enum):
    CONV2D = "conv2d"
    DEPTHWISE = "depthwise"
    POINTWISE = "pointwise"
    BATCHNORM = "batchnorm"
    RELU6 = "relu6"
    MAXPOOL = "maxpool"
    FULLY_CONNECTED = "fully_connected"


WEIGHTED_KINDS = (LayerKind.CONV2D, LayerKind.DEPTHWISE, LayerKind.POINTWISE, LayerKind.FULLY_CONNECTED)


@dataclass(frozen=True)
class ArchConfig:
    block_kind: BlockKind = BlockKind.DP
    use_bypass: bool = False
    gamma: int = 8
    expansion: int = 6
    input_h: int = 200
    input_w: int = 200
    input_ch: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        self.validate()

    def validate(self) -> None:
        if self.gamma < 1 or any(c % self.gamma for c in BASE_CHANNELS):
            raise ConfigError(f"gamma={self.gamma} does not divide the channel plan {BASE_CHANNELS}")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        if min(self.input_h, self.input_w, self.input_ch) < 1:
            raise ConfigError("input dimensions must be positive")

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(c // self.gamma for c in BASE_CHANNELS)

    @property
    def label(self) -> str:
        bypass = "bypass" if self.use_bypass else "nobypass"
        return f"{self.block_kind.value}-{bypass}-g{self.gamma}"


def conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    kernel: int
    stride: int
    pad: int
    in_ch: int
    out_ch: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))

    @property
    def weight_shape(self) -> Optional[tuple[int, ...]]:
        if self.kind == LayerKind.CONV2D:
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        if self.kind == LayerKind.DEPTHWISE:
            return (self.out_ch, 1, self.kernel, self.kernel)
        if self.kind == LayerKind.POINTWISE:
            return (self.out_ch, self.in_ch, 1, 1)
        if self.kind == LayerKind.FULLY_CONNECTED:
            return (self.out_ch, self.in_ch)
        return None

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.in_ch, self.in_h, self.in_w)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.out_ch, self.out_h, self.out_w)

    def n_weights(self) -> int:
        shape = self.weight_shape
        if shape is None:
            return 0
        n = 1
        for d in shape:
            n *= d
        return n

    def n_params(self) -> int:
        if self.kind == LayerKind.BATCHNORM:
            return 2 * self.out_ch
        return self.n_weights() + (self.out_ch if self.bias and self.kind in WEIGHTED_KINDS else 0)

    def macs(self) -> int:
        spatial = self.out_h * self.out_w
        if self.kind == LayerKind.CONV2D:
            return spatial * self.out_ch * self.kernel * self.kernel * self.in_ch
        if self.kind == LayerKind.DEPTHWISE:
            return spatial * self.out_ch * self.kernel * self.kernel
        if self.kind in (LayerKind.POINTWISE, LayerKind.FULLY_CONNECTED):
            return spatial * self.out_ch * self.in_ch
        return 0


@dataclass(frozen=True)
class Block:
    name: str
    main: tuple[LayerSpec, ...]
    bypass: Optional[tuple[LayerSpec, ...]] = None

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return self.main[-1].out_shape


@dataclass(frozen=True)
class ModelGraph:
    config: Optional[ArchConfig] = None
    stem: tuple[LayerSpec, ...] = ()
    blocks: tuple[Block, ...] = ()
    heads: tuple[LayerSpec, ...] = ()

    def layers(self) -> Iterator[LayerSpec]:
        """All layers in execution order: stem, each block (main then bypass), heads."""
        yield from self.stem
        for block in self.blocks:
            yield from block.main
            if block.bypass:
                yield from block.bypass
        yield from self.heads

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers():
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """Shape of the tensor flattened into the heads."""
        if self.blocks:
            return self.blocks[-1].out_shape
        return self.stem[-1].out_shape


class _Builder:
    """Accumulates Conv-BN-ReLU6 triplets while tracking the running shape."""

    def __init__(self, prefix: str, ch: int, h: int, w: int):
        self.prefix = prefix
        self.ch, self.h, self.w = ch, h, w
        self.layers: list[LayerSpec] = []

    def _add(self, name, kind, kernel, stride, pad, out_ch, bias=False):
        oh, ow = conv_out(self.h, kernel, stride, pad), conv_out(self.w, kernel, stride, pad)
        spec = LayerSpec(f"{self.prefix}.{name}", kind, kernel, stride, pad,
                         self.ch, out_ch, self.h, self.w, oh, ow, bias)
        self.layers.append(spec)
        self.ch, self.h, self.w = out_ch, oh, ow

    def conv_bn_relu(self, tag: str, kind: LayerKind, kernel: int, stride: int, out_ch: int):
        pad = kernel // 2
        if kind == LayerKind.DEPTHWISE:
            out_ch = self.ch
        self._add(tag, kind, kernel, stride, pad, out_ch)
        self._add(f"{tag}_bn", LayerKind.BATCHNORM, 1, 1, 0, out_ch)
        self._add(f"{tag}_relu", LayerKind.RELU6, 1, 1, 0, out_ch)

    def maxpool(self, tag: str):
        self._add(tag, LayerKind.MAXPOOL, 2, 2, 0, self.ch)


def _main_branch(cfg: ArchConfig, name: str, cin: int, cout: int, h: int, w: int) -> tuple[LayerSpec, ...]:
    b = _Builder(f"{name}.main", cin, h, w)
    if cfg.block_kind == BlockKind.RB:
        b.conv_bn_relu("conv1", LayerKind.CONV2D, 3, 2, cout)
        b.conv_bn_relu("conv2", LayerKind.CONV2D, 3, 1, cout)
    elif cfg.block_kind == BlockKind.DP:
        b.conv_bn_relu("dw1", LayerKind.DEPTHWISE, 3, 2, cin)
        b.conv_bn_relu("pw1", LayerKind.POINTWISE, 1, 1, cout)
        b.conv_bn_relu("dw2", LayerKind.DEPTHWISE, 3, 1, cout)
        b.conv_bn_relu("pw2", LayerKind.POINTWISE, 1, 1, cout)
    else:
        b.conv_bn_relu("expand", LayerKind.POINTWISE, 1, 1, cin * cfg.expansion)
        b.conv_bn_relu("dw", LayerKind.DEPTHWISE, 3, 2, cin * cfg.expansion)
        b.conv_bn_relu("project", LayerKind.POINTWISE, 1, 1, cout)
    return tuple(b.layers)


def _bypass_branch(name: str, cin: int, cout: int, h: int, w: int) -> tuple[LayerSpec, ...]:
    b = _Builder(f"{name}.bypass", cin, h, w)
    b.conv_bn_relu("conv", LayerKind.POINTWISE, 1, 2, cout)
    return tuple(b.layers)


def build_model(config: ArchConfig) -> ModelGraph:
    """Expand an :class:`ArchConfig` into the full ordered layer list.

    Stem: 5x5/2 conv, BN, ReLU6, 2x2/2 max-pool. Three blocks with channel plan
    (32, 64, 128)/gamma each halve the spatial size; two 1-output FC heads read
    the flattened feature map.
    """
    config.validate()
    c1, c2, c3 = config.channels
    stem = _Builder("stem", config.input_ch, config.input_h, config.input_w)
    stem.conv_bn_relu("conv", LayerKind.CONV2D, 5, 2, c1)
    stem.maxpool("pool")

    blocks = []
    ch, h, w = stem.ch, stem.h, stem.w
    for i, cout in enumerate((c1, c2, c3), start=1):
        name = f"block{i}"
        main = _main_branch(config, name, ch, cout, h, w)
        bypass = _bypass_branch(name, ch, cout, h, w) if config.use_bypass else None
        if bypass is not None and bypass[-1].out_shape != main[-1].out_shape:
            raise ConfigError(f"{name}: bypass shape {bypass[-1].out_shape} != main {main[-1].out_shape}")
        blocks.append(Block(name, main, bypass))
        ch, h, w = main[-1].out_shape

    features = ch * h * w
    heads = tuple(
        LayerSpec(f"head.{tag}", LayerKind.FULLY_CONNECTED, 1, 1, 0, features, 1, 1, 1, 1, 1, bias=True)
        for tag in ("yaw", "coll")
    )
    return ModelGraph(config, tuple(stem.layers), tuple(blocks), heads)


def count_params(graph: ModelGraph) -> int:
    return sum(spec.n_params() for spec in graph.layers())


def count_macs(graph: ModelGraph) -> int:
    return sum(spec.macs() for spec in graph.layers())


def count_weights(graph: ModelGraph) -> int:
    """Conv/FC weight elements only (no BN affine, no biases)."""
    return sum(spec.n_weights() for spec in graph.layers())


def round_sig(x: float, sig: int = 2) -> float:
    """Round to ``sig`` significant figures, half away from zero."""
    if x == 0:
        return 0.0
    from decimal import ROUND_HALF_UP, Decimal

    d = Decimal(repr(float(x)))
    exp = d.adjusted() - sig + 1
    return float(d.scaleb(-exp).quantize(Decimal(1), rounding=ROUND_HALF_UP).scaleb(exp))


def human(x: float, sig: int = 2) -> str:
    """Format like the published tables: 2.9k, 41M, 320k."""
    r = round_sig(x, sig)
    for div, suffix in ((1e6, "M"), (1e3, "k")):
        if abs(r) >= div:
            text = f"{r / div:.{max(0, sig - len(str(int(abs(r / div)))))}f}"
            if "." in text:
                text = text.rstrip("0").rstrip(".")
            return text + suffix
    return f"{r:g}"


def summarize(graph: ModelGraph) -> str:
    rows = [("layer", "kind", "k/s/p", "in", "out", "params", "macs")]
    for s in graph.layers():
        rows.append((
            s.name, s.kind.value, f"{s.kernel}/{s.stride}/{s.pad}",
            f"{s.in_ch}x{s.in_h}x{s.in_w}", f"{s.out_ch}x{s.out_h}x{s.out_w}",
            str(s.n_params()), str(s.macs()),
        ))
    rows.append(("TOTAL", "", "", "", "", str(count_params(graph)), str(count_macs(graph))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if j < 2 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths))))
        if i == 0 or i == len(rows) - 2:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines)


# --- text serialization -------------------------------------------------------

_SPEC_FIELDS = [f.name for f in fields(LayerSpec)]


def _spec_line(section: str, spec: LayerSpec) -> str:
    parts = [f"section={section}"]
    for name in _SPEC_FIELDS:
        v = getattr(spec, name)
        if isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, bool):
            v = int(v)
        parts.append(f"{name}={v}")
    return "layer " + " ".join(parts)


def dumps_graph(graph: ModelGraph) -> str:
    lines = [f"# {GRAPH_FORMAT} v{GRAPH_VERSION}"]
    if graph.config is not None:
        c = graph.config
        lines.append(
            f"config block_kind={c.block_kind.value} use_bypass={int(c.use_bypass)} gamma={c.gamma} "
            f"expansion={c.expansion} input_h={c.input_h} input_w={c.input_w} input_ch={c.input_ch}"
        )
    for spec in graph.stem:
        lines.append(_spec_line("stem", spec))
    for block in graph.blocks:
        for spec in block.main:
            lines.append(_spec_line(f"{block.name}.main", spec))
        for spec in block.bypass or ():
            lines.append(_spec_line(f"{block.name}.bypass", spec))
    for spec in graph.heads:
        lines.append(_spec_line("head", spec))
    return "\n".join(lines) + "\n"


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def loads_graph(text: str) -> ModelGraph:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(f"# {GRAPH_FORMAT} v"):
        raise ValueError("not a tinydronet graph file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != GRAPH_VERSION:
        raise ValueError(f"unsupported graph version {version}")
    config = None
    stem: list[LayerSpec] = []
    heads: list[LayerSpec] = []
    blocks: dict[str, dict[str, list[LayerSpec]]] = {}
    for ln in lines[1:]:
        head, *rest = ln.split()
        kv = _kv(rest)
        if head == "config":
            config = ArchConfig(
                BlockKind(kv["block_kind"]), bool(int(kv["use_bypass"])), int(kv["gamma"]),
                int(kv["expansion"]), int(kv["input_h"]), int(kv["input_w"]), int(kv["input_ch"]),
            )
            continue
        if head != "layer":
            raise ValueError(f"unknown record {head!r}")
        section = kv.pop("section")
        spec = LayerSpec(
            name=kv["name"], kind=LayerKind(kv["kind"]),
            bias=bool(int(kv["bias"])),
            **{k: int(kv[k]) for k in _SPEC_FIELDS if k not in ("name", "kind", "bias")},
        )
        if section == "stem":
            stem.append(spec)
        elif section == "head":
            heads.append(spec)
        else:
            bname, branch = section.split(".")
            blocks.setdefault(bname, {}).setdefault(branch, []).append(spec)
    block_list = tuple(
        Block(name, tuple(b["main"]), tuple(b["bypass"]) if "bypass" in b else None)
        for name, b in blocks.items()
    )
    return ModelGraph(config, tuple(stem), block_list, tuple(heads))


def save_graph(graph: ModelGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(graph))


def load_graph(path: str | Path) -> ModelGraph:
    return loads_graph(Path(path).read_text())
