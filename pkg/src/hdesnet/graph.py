"""Static computation graph: construction, shape inference, execution, cost.

A graph is an ordered collection of :class:`Node` objects.  Each node has a
kind (one of the frozen dataclasses below), a tuple of input node ids and a
tuple of weight names it reads from the weight store.  Exactly one ``Input``
node feeds the graph; ``Output`` nodes give results their public names.

Manifest format (one node per line, fields separated by `` | ``)::

    # hdesnet graph manifest v1
    <id> | <kind> | <key=value ...> | <input ids, comma separated> | <weight names>

Empty fields are written as ``-``.  Lines starting with ``#`` are comments.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, fields, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from . import kernels, reference
from .errors import (
    ConfigError,
    InvalidGeometryError,
    MissingWeightError,
    NumericError,
    ShapeError,
    StructureError,
)
from .kernels import BN_EPS, BnParams, ConvSpec
from .tensor import Tensor, concat_channels, elementwise_add

Dims = tuple[int, int, int, int]


@dataclass(frozen=True)
class Input:
    pass


@dataclass(frozen=True)
class Output:
    name: str


@dataclass(frozen=True)
class Conv:
    spec: ConvSpec
    bias: bool = False


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = BN_EPS


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Relu6:
    pass


@dataclass(frozen=True)
class Upsample:
    factor: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class ConcatChannels:
    pass


@dataclass(frozen=True)
class Add:
    pass


NodeKind = Input | Output | Conv | BatchNorm | Relu | Relu6 | Upsample | GlobalAvgPool | ConcatChannels | Add

_KIND_NAMES = {
    Input: "input", Output: "output", Conv: "conv", BatchNorm: "batchnorm", Relu: "relu",
    Relu6: "relu6", Upsample: "upsample", GlobalAvgPool: "gap", ConcatChannels: "concat", Add: "add",
}
_KINDS_BY_NAME = {v: k for k, v in _KIND_NAMES.items()}
_ARITY = {Input: (0, 0), Add: (2, 2), ConcatChannels: (1, None)}

BN_SUFFIXES = ("gamma", "beta", "mean", "var")


def weight_names_for(node_id: str, kind) -> tuple[str, ...]:
    if isinstance(kind, Conv):
        return (f"{node_id}.weight",) + ((f"{node_id}.bias",) if kind.bias else ())
    if isinstance(kind, BatchNorm):
        return tuple(f"{node_id}.{s}" for s in BN_SUFFIXES)
    return ()


def weight_shapes_for(node: "Node") -> dict[str, tuple[int, ...]]:
    k = node.kind
    if isinstance(k, Conv):
        shapes = {node.weights[0]: k.spec.weight_shape}
        if k.bias:
            shapes[node.weights[1]] = (k.spec.out_ch,)
        return shapes
    if isinstance(k, BatchNorm):
        return {name: (k.channels,) for name in node.weights}
    return {}


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    inputs: tuple[str, ...] = ()
    weights: tuple[str, ...] = ()


class Graph:
    """Validated, immutable DAG of nodes."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if not node.id or any(ch.isspace() or ch in "|," for ch in node.id):
                raise StructureError(f"invalid node id {node.id!r}")
            if node.id in self.nodes:
                raise StructureError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self._validate()
        self.order: tuple[str, ...] = self._toposort()
        self._consumers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                self._consumers[src].append(node.id)

    def _validate(self):
        inputs = [n.id for n in self.nodes.values() if isinstance(n.kind, Input)]
        if len(inputs) != 1:
            raise StructureError(f"graph needs exactly one Input node, found {len(inputs)}")
        names = Counter(n.kind.name for n in self.nodes.values() if isinstance(n.kind, Output))
        dup = [k for k, v in names.items() if v > 1]
        if dup:
            raise StructureError(f"duplicate output names {dup}")
        for node in self.nodes.values():
            lo, hi = _ARITY.get(type(node.kind), (1, 1))
            if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
                raise StructureError(f"node {node.id!r} ({_KIND_NAMES[type(node.kind)]}) has {len(node.inputs)} inputs")
            for src in node.inputs:
                if src not in self.nodes:
                    raise StructureError(f"node {node.id!r} references missing node {src!r}")
            expected = weight_names_for(node.id, node.kind)
            if len(node.weights) != len(expected):
                raise StructureError(f"node {node.id!r} lists weights {node.weights}, expected {len(expected)}")

    def _toposort(self) -> tuple[str, ...]:
        indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        users: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                users[src].append(n.id)
        # insertion order breaks ties so the order is stable
        ready = [nid for nid in self.nodes if indeg[nid] == 0]
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for u in users[nid]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
        if len(order) != len(self.nodes):
            raise StructureError("graph contains a cycle")
        return tuple(order)

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes.values() if isinstance(n.kind, Input))

    @property
    def outputs(self) -> dict[str, str]:
        return {n.kind.name: n.id for n in self.nodes.values() if isinstance(n.kind, Output)}

    def consumers(self, node_id: str) -> list[str]:
        return list(self._consumers[node_id])

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for nid in self.order:
            shapes.update(weight_shapes_for(self.nodes[nid]))
        return shapes

    def count(self, kind_type) -> int:
        return sum(isinstance(n.kind, kind_type) for n in self.nodes.values())


class GraphBuilder:
    """Accumulates nodes; ``build()`` validates and freezes them into a Graph."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._ids: set[str] = set()

    def add(self, node_id: str, kind, *inputs: str) -> str:
        if node_id in self._ids:
            raise StructureError(f"duplicate node id {node_id!r}")
        self._ids.add(node_id)
        self._nodes.append(Node(node_id, kind, tuple(inputs), weight_names_for(node_id, kind)))
        return node_id

    def input(self, node_id: str = "input") -> str:
        return self.add(node_id, Input())

    def output(self, name: str, src: str) -> str:
        return self.add(f"out.{name}", Output(name), src)

    def conv(self, node_id: str, src: str, in_ch, out_ch, kernel=1, stride=1, padding=0,
             dilation=1, groups=1, bias=False) -> str:
        spec = ConvSpec(in_ch, out_ch, kernel, stride, padding, dilation, groups)
        return self.add(node_id, Conv(spec, bias), src)

    def bn(self, node_id: str, src: str, channels: int) -> str:
        return self.add(node_id, BatchNorm(channels), src)

    def build(self) -> Graph:
        return Graph(self._nodes)


# -- shape inference ---------------------------------------------------------

def _node_shape(node: Node, in_shapes: list[Dims], input_dims: Dims) -> Dims:
    k = node.kind
    if isinstance(k, Input):
        return input_dims
    if isinstance(k, (Output, Relu, Relu6)):
        return in_shapes[0]
    n, c, h, w = in_shapes[0]
    if isinstance(k, Conv):
        if c != k.spec.in_ch:
            raise ShapeError(f"expects {k.spec.in_ch} input channels, got {c}")
        oh, ow = k.spec.out_hw(h, w)
        return (n, k.spec.out_ch, oh, ow)
    if isinstance(k, BatchNorm):
        if c != k.channels:
            raise ShapeError(f"has {k.channels} channels, input has {c}")
        return in_shapes[0]
    if isinstance(k, Upsample):
        if k.factor < 1:
            raise ShapeError(f"invalid upsample factor {k.factor}")
        return (n, c, h * k.factor, w * k.factor)
    if isinstance(k, GlobalAvgPool):
        return (n, c, 1, 1)
    if isinstance(k, ConcatChannels):
        if any((s[0], s[2], s[3]) != (n, h, w) for s in in_shapes):
            raise ShapeError(f"concat of mismatched spatial dims {in_shapes}")
        return (n, sum(s[1] for s in in_shapes), h, w)
    if isinstance(k, Add):
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add of mismatched shapes {in_shapes}")
        return in_shapes[0]
    raise StructureError(f"unknown node kind {k!r}")


def infer_shapes(g: Graph, input_dims) -> dict[str, Dims]:
    input_dims = tuple(int(d) for d in input_dims)
    if len(input_dims) != 4 or min(input_dims) < 1:
        raise ShapeError(f"input dims must be 4 positive ints, got {input_dims}")
    shapes: dict[str, Dims] = {}
    for nid in g.order:
        node = g.nodes[nid]
        try:
            shapes[nid] = _node_shape(node, [shapes[s] for s in node.inputs], input_dims)
        except InvalidGeometryError as e:
            raise InvalidGeometryError(f"node {nid!r}: {e}") from None
        except ShapeError as e:
            raise ShapeError(f"node {nid!r}: {e}") from None
    return shapes


def output_shapes(g: Graph, input_dims) -> dict[str, Dims]:
    shapes = infer_shapes(g, input_dims)
    return {name: shapes[nid] for name, nid in g.outputs.items()}


# -- execution ---------------------------------------------------------------

FAST_KERNELS: dict[str, Callable] = {
    "conv2d": kernels.conv2d,
    "batchnorm": kernels.batchnorm_infer,
    "relu": kernels.relu,
    "relu6": kernels.relu6,
    "global_avg_pool": kernels.global_avg_pool,
    "bilinear_upsample": kernels.bilinear_upsample,
}


def check_weights(g: Graph, weights: Mapping[str, np.ndarray]):
    for name, shape in g.weight_shapes().items():
        if name not in weights:
            raise MissingWeightError(f"weight {name!r} not found in weight store")
        got = tuple(np.shape(weights[name]))
        if got != shape:
            raise ShapeError(f"weight {name!r} has shape {got}, graph expects {shape}")


def _run_node(node: Node, args: list[Tensor], weights, K) -> Tensor:
    k = node.kind
    if isinstance(k, (Input, Output)):
        return args[0]
    if isinstance(k, Conv):
        bias = weights[node.weights[1]] if k.bias else None
        return K["conv2d"](args[0], weights[node.weights[0]], bias, k.spec)
    if isinstance(k, BatchNorm):
        p = BnParams(*(weights[w] for w in node.weights), epsilon=k.eps)
        return K["batchnorm"](args[0], p)
    if isinstance(k, Relu):
        return K["relu"](args[0])
    if isinstance(k, Relu6):
        return K["relu6"](args[0])
    if isinstance(k, Upsample):
        return K["bilinear_upsample"](args[0], k.factor)
    if isinstance(k, GlobalAvgPool):
        return K["global_avg_pool"](args[0])
    if isinstance(k, ConcatChannels):
        return concat_channels(args)
    if isinstance(k, Add):
        return elementwise_add(args[0], args[1])
    raise StructureError(f"unknown node kind {k!r}")


def execute(g: Graph, weights: Mapping[str, np.ndarray], x: Tensor, *,
            reference_kernels: bool = False, keep: Iterable[str] = ()) -> dict[str, Tensor]:
    """Run the graph on ``x`` and return its named outputs.

    ``keep`` names extra node ids whose tensors are also returned (keyed by
    node id); everything else is released as soon as its last consumer ran.
    """
    infer_shapes(g, x.shape)
    check_weights(g, weights)
    K = reference.KERNELS if reference_kernels else FAST_KERNELS
    keep = set(keep)
    remaining = {nid: len(g._consumers[nid]) for nid in g.nodes}
    env: dict[str, Tensor] = {}
    kept: dict[str, Tensor] = {}
    for nid in g.order:
        node = g.nodes[nid]
        args = [x] if isinstance(node.kind, Input) else [env[s] for s in node.inputs]
        out = _run_node(node, args, weights, K)
        if not out.is_finite():
            raise NumericError(f"node {nid!r} produced non-finite values")
        env[nid] = out
        if nid in keep:
            kept[nid] = out
        for s in node.inputs:
            remaining[s] -= 1
            if remaining[s] == 0 and not isinstance(g.nodes[s].kind, Output):
                del env[s]
    result = {name: env[nid] for name, nid in g.outputs.items()}
    result.update(kept)
    return result


# -- cost accounting ---------------------------------------------------------

def node_flops(node: Node, out_shape: Dims, in_shapes: list[Dims]) -> int:
    """2 per multiply-accumulate for convs, 1 per output element for
    batch norm, activations, upsampling and add, 1 per input element for
    global pooling; inputs, outputs and concat are free."""
    k = node.kind
    out_elems = int(np.prod(out_shape))
    if isinstance(k, Conv):
        return 2 * k.spec.macs(out_elems)
    if isinstance(k, (BatchNorm, Relu, Relu6, Upsample, Add)):
        return out_elems
    if isinstance(k, GlobalAvgPool):
        return int(np.prod(in_shapes[0]))
    return 0


def count_flops(g: Graph, input_dims) -> int:
    shapes = infer_shapes(g, input_dims)
    return sum(node_flops(n, shapes[n.id], [shapes[s] for s in n.inputs]) for n in g)


def count_macs(g: Graph, input_dims) -> int:
    shapes = infer_shapes(g, input_dims)
    return sum(n.kind.spec.macs(int(np.prod(shapes[n.id]))) for n in g if isinstance(n.kind, Conv))


def count_params(g: Graph) -> int:
    return sum(int(np.prod(s)) for s in g.weight_shapes().values())


# -- manifest ----------------------------------------------------------------

def _kind_params(kind) -> str:
    if isinstance(kind, Conv):
        s = kind.spec
        return (f"in={s.in_ch} out={s.out_ch} k={s.kernel} s={s.stride} p={s.padding} "
                f"d={s.dilation} g={s.groups} bias={int(kind.bias)}")
    parts = []
    for f in fields(kind):
        v = getattr(kind, f.name)
        parts.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return " ".join(parts)


def to_manifest(g: Graph) -> str:
    lines = ["# hdesnet graph manifest v1"]
    for n in g:
        lines.append(" | ".join([
            n.id,
            _KIND_NAMES[type(n.kind)],
            _kind_params(n.kind) or "-",
            ",".join(n.inputs) or "-",
            ",".join(n.weights) or "-",
        ]))
    return "\n".join(lines) + "\n"


_CONV_KEYS = {"in": "in_ch", "out": "out_ch", "k": "kernel", "s": "stride", "p": "padding",
              "d": "dilation", "g": "groups"}


def _parse_kind(name: str, params: dict[str, str]):
    if name not in _KINDS_BY_NAME:
        raise ConfigError(f"unknown node kind {name!r}")
    cls = _KINDS_BY_NAME[name]
    if cls is Conv:
        spec = ConvSpec(**{_CONV_KEYS[k]: int(v) for k, v in params.items() if k != "bias"})
        return Conv(spec, bias=params.get("bias", "0") == "1")
    kwargs = {}
    for f in fields(cls):
        raw = params[f.name]
        kwargs[f.name] = {"int": int, "float": float}.get(f.type, str)(raw)
    return cls(**kwargs)


def parse_manifest(text: str) -> Graph:
    nodes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c.strip() for c in line.split(" | ")]
        if len(cols) != 5:
            raise ConfigError(f"manifest line {lineno}: expected 5 fields, got {len(cols)}")
        nid, kind, params, inputs, wnames = cols
        kv = {} if params == "-" else dict(p.split("=", 1) for p in params.split())
        try:
            k = _parse_kind(kind, kv)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"manifest line {lineno}: bad parameters ({e})") from None
        nodes.append(Node(nid, k,
                          () if inputs == "-" else tuple(inputs.split(",")),
                          () if wnames == "-" else tuple(wnames.split(","))))
    return Graph(nodes)


def rewire(g: Graph, drop: set[str], redirect: Mapping[str, str], extra: Iterable[Node] = (),
           replace_nodes: Mapping[str, Node] | None = None) -> Graph:
    """Copy of ``g`` without the ``drop`` nodes.

    Input references are renamed per ``redirect``, nodes listed in
    ``replace_nodes`` are swapped in by id, and ``extra`` nodes are placed
    where the first dropped node used to be so the manifest stays readable.
    """
    replace_nodes = replace_nodes or {}
    extra = list(extra)
    out: list[Node] = []
    placed = not extra
    for n in g:
        if n.id in drop:
            if not placed:
                out.extend(extra)
                placed = True
            continue
        n = replace_nodes.get(n.id, n)
        out.append(replace(n, inputs=tuple(redirect.get(s, s) for s in n.inputs)))
    if not placed:
        out.extend(extra)
    return Graph(out)
