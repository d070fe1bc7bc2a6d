"""HDES-Net graph assembly.

MobileNetV1 encoder -> ASPP -> stride-4 merge decoder -> depth and
segmentation heads, with the segmentation features added into the depth
branch before the depth head.  Every conv is followed by batch norm and an
activation (ReLU6 in the backbone, ReLU elsewhere) except the two 1x1
prediction convs, which carry a bias instead.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidGeometryError, StructureError
from .graph import Add, BatchNorm, ConcatChannels, Conv, Graph, GraphBuilder, GlobalAvgPool, Relu, Relu6, Upsample

# (out_channels, stride) of the 13 depthwise-separable blocks, width multiplier 1.0
MOBILENET_V1_BLOCKS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)
STEM_CHANNELS = 32
LOW_LEVEL_BLOCK = 3  # output of block 3 is the stride-4 tap
ENCODER_STRIDE = 32


@dataclass(frozen=True)
class AsppConfig:
    branch_rates: tuple[int, ...] = (1, 3, 6, 9)
    branch_channels: int = 256
    include_global_pool: bool = True
    project_channels: int = 256

    def __post_init__(self):
        rates = tuple(int(r) for r in self.branch_rates)
        object.__setattr__(self, "branch_rates", rates)
        if not rates:
            raise ConfigError("ASPP needs at least one branch rate")
        if list(rates) != sorted(rates) or rates[0] < 1:
            raise ConfigError(f"ASPP rates must be positive and non-decreasing, got {rates}")
        if rates.count(1) > 1:
            raise ConfigError("at most one rate-1 branch")

    @classmethod
    def original(cls) -> "AsppConfig":
        return cls((1, 3, 6, 9), include_global_pool=True)

    @classmethod
    def optimized(cls) -> "AsppConfig":
        return cls((1, 5, 9), include_global_pool=False)

    @property
    def n_branches(self) -> int:
        return len(self.branch_rates) + int(self.include_global_pool)


@dataclass(frozen=True)
class HdesConfig:
    input_hw: tuple[int, int] = (224, 224)
    decoder_channels: int = 96
    num_seg_classes: int = 2
    aspp: AsppConfig = field(default_factory=AsppConfig.original)
    low_level_proj_channels: int = 48
    fuse_semantic: bool = True

    def __post_init__(self):
        if self.decoder_channels != 96:
            raise ConfigError("decoder width is fixed at 96 channels")
        if self.num_seg_classes < 2:
            raise ConfigError("need at least 2 segmentation classes")

    @classmethod
    def optimized(cls, **kw) -> "HdesConfig":
        return cls(aspp=AsppConfig.optimized(), **kw)


@dataclass
class Fragment:
    """Partially built graph plus the node ids later stages attach to."""

    builder: GraphBuilder
    taps: dict[str, str]
    channels: dict[str, int]

    def graph(self) -> Graph:
        """Freeze a copy with every tap exposed as a named output."""
        b = copy.deepcopy(self.builder)
        for name, nid in self.taps.items():
            b.output(name, nid)
        return b.build()


def conv_bn_act(b: GraphBuilder, prefix: str, src: str, cin: int, cout: int, kernel=1,
                stride=1, padding=0, dilation=1, groups=1, act=Relu) -> str:
    x = b.conv(prefix, src, cin, cout, kernel, stride, padding, dilation, groups)
    x = b.bn(f"{prefix}.bn", x, cout)
    return b.add(f"{prefix}.act", act(), x)


def sep_conv(b: GraphBuilder, prefix: str, src: str, cin: int, cout: int, stride=1,
             dilation=1, act=Relu) -> str:
    """3x3 depthwise (dilated, padding = dilation) then 1x1 pointwise."""
    x = conv_bn_act(b, f"{prefix}.dw", src, cin, cin, 3, stride, dilation, dilation, cin, act)
    return conv_bn_act(b, f"{prefix}.pw", x, cin, cout, act=act)


def _input_builder(cfg: HdesConfig, builder, src):
    if builder is None:
        builder = GraphBuilder()
        src = builder.input()
    return builder, src


def build_encoder(cfg: HdesConfig, builder: GraphBuilder | None = None, src: str | None = None) -> Fragment:
    h, w = cfg.input_hw
    if h % ENCODER_STRIDE or w % ENCODER_STRIDE or h < 1 or w < 1:
        raise InvalidGeometryError(f"input {h}x{w} must be divisible by {ENCODER_STRIDE}")
    b, x = _input_builder(cfg, builder, src)
    x = conv_bn_act(b, "enc.conv0", x, 3, STEM_CHANNELS, 3, 2, 1, act=Relu6)
    cin = STEM_CHANNELS
    taps, chans = {}, {}
    for i, (cout, stride) in enumerate(MOBILENET_V1_BLOCKS, 1):
        x = sep_conv(b, f"enc.b{i}", x, cin, cout, stride, act=Relu6)
        cin = cout
        if i == LOW_LEVEL_BLOCK:
            taps["low_level"], chans["low_level"] = x, cout
    taps["high_level"], chans["high_level"] = x, cin
    return Fragment(b, taps, chans)


def branch_ids(rates, prefix: str = "aspp") -> list[str]:
    """Branch prefixes; a repeated rate gets a letter suffix (r5, r5b, r5c, ...)."""
    seen: dict[int, int] = {}
    ids = []
    for r in rates:
        k = seen.get(r, 0)
        seen[r] = k + 1
        ids.append(f"{prefix}.r{r}" + ("" if k == 0 else chr(ord("a") + k)))
    return ids


def build_aspp(cfg: AsppConfig, builder: GraphBuilder | None = None, src: str | None = None,
               in_ch: int = 1024, map_hw: tuple[int, int] = (7, 7)) -> Fragment:
    if builder is None:
        builder = GraphBuilder()
        src = builder.input()
    b = builder
    c = cfg.branch_channels
    branches = []
    for r, pid in zip(cfg.branch_rates, branch_ids(cfg.branch_rates)):
        if r == 1:
            branches.append(conv_bn_act(b, pid, src, in_ch, c))
        else:
            branches.append(sep_conv(b, pid, src, in_ch, c, dilation=r))
    if cfg.include_global_pool:
        mh, mw = map_hw
        if mh != mw:
            raise InvalidGeometryError(f"global-pool branch needs a square map, got {mh}x{mw}")
        x = b.add("aspp.pool.gap", GlobalAvgPool(), src)
        x = conv_bn_act(b, "aspp.pool.conv", x, in_ch, c)
        branches.append(b.add("aspp.pool.up", Upsample(mh), x))
    x = b.add("aspp.concat", ConcatChannels(), *branches)
    x = conv_bn_act(b, "aspp.proj", x, c * len(branches), cfg.project_channels)
    return Fragment(b, {"aspp": x}, {"aspp": cfg.project_channels})


def build_decoder_and_heads(cfg: HdesConfig, builder: GraphBuilder, taps: dict[str, str],
                            channels: dict[str, int]) -> Fragment:
    b = builder
    d = cfg.decoder_channels
    up = b.add("dec.up8", Upsample(8), taps["aspp"])
    low = conv_bn_act(b, "dec.low", taps["low_level"], channels["low_level"], cfg.low_level_proj_channels)
    x = b.add("dec.concat", ConcatChannels(), up, low)
    x = sep_conv(b, "dec.sep1", x, channels["aspp"] + cfg.low_level_proj_channels, d)
    x = sep_conv(b, "dec.sep2", x, d, d)

    seg = sep_conv(b, "seg.sep", x, d, d)
    depth = sep_conv(b, "depth.sep", x, d, d)
    if cfg.fuse_semantic:
        depth = b.add("depth.fuse", Add(), depth, seg)

    y = b.conv("depth.head", depth, d, 1, bias=True)
    y = b.add("depth.up2", Upsample(2), y)
    y = b.add("depth.relu", Relu(), y)
    s = b.conv("seg.head", seg, d, cfg.num_seg_classes, bias=True)
    s = b.add("seg.up2", Upsample(2), s)
    b.output("depth", y)
    b.output("segmentation", s)
    return Fragment(b, {"depth": y, "segmentation": s}, {"depth": 1, "segmentation": cfg.num_seg_classes})


def build_hdesnet(cfg: HdesConfig | None = None) -> Graph:
    cfg = cfg or HdesConfig()
    enc = build_encoder(cfg)
    h, w = cfg.input_hw
    aspp = build_aspp(cfg.aspp, enc.builder, enc.taps["high_level"], enc.channels["high_level"],
                      (h // ENCODER_STRIDE, w // ENCODER_STRIDE))
    taps = {**enc.taps, **aspp.taps}
    chans = {**enc.channels, **aspp.channels}
    return build_decoder_and_heads(cfg, enc.builder, taps, chans).builder.build()


FUSE_NODE = "depth.fuse"


def zero_fusion_path(g: Graph, weights):
    """Copy of ``weights`` with the semantic side of the depth fusion forced to 0.

    Zeroes the last conv before the add (weight and bias) and the shift of
    its batch norm, so the added feature map is exactly zero and the depth
    output should equal that of the unfused network.
    """
    if FUSE_NODE not in g.nodes or not isinstance(g[FUSE_NODE].kind, Add):
        raise StructureError(f"graph has no {FUSE_NODE!r} add node")
    nid = g[FUSE_NODE].inputs[1]
    bn = None
    while not isinstance(g[nid].kind, Conv):
        if isinstance(g[nid].kind, BatchNorm):
            bn = g[nid]
        nid = g[nid].inputs[0]
    ws = type(weights)(weights.items())
    for name in g[nid].weights:
        ws[name] = np.zeros_like(weights[name])
    if bn is not None:
        gamma, beta, mean, var = bn.weights
        ws[beta] = np.zeros_like(weights[beta])
        ws[mean] = np.zeros_like(weights[mean])
    return ws
