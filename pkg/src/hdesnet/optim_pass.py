"""Graph rewrites: ASPP structure optimization and batch-norm folding.

Both passes are pure: they return a new graph and a new weight store and
leave their arguments untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import PatternMissError, StructureError
from .graph import (
    BatchNorm,
    ConcatChannels,
    Conv,
    GlobalAvgPool,
    Graph,
    GraphBuilder,
    Node,
    Relu,
    Relu6,
    Upsample,
    count_flops,
    count_params,
    output_shapes,
    rewire,
    weight_names_for,
)
from .kernels import BnParams
from .model_io import WeightStore, he_normal, init_node_weights
from .net_builder import branch_ids

ORIGINAL_RATES = (1, 3, 6, 9)
OPTIMIZED_RATES = (1, 5, 9)
DEFAULT_DIMS = (1, 3, 224, 224)


@dataclass
class RewriteReport:
    pass_name: str
    nodes_before: int
    nodes_after: int
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    pattern_found: bool = True
    notes: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"pass={self.pass_name}", f"pattern_found={str(self.pattern_found).lower()}"]
        for key in ("nodes", "params", "flops"):
            lines.append(f"{key}_before={getattr(self, key + '_before')}")
            lines.append(f"{key}_after={getattr(self, key + '_after')}")
        lines += [f"{k}={v}" for k, v in self.notes.items()]
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in ("pass_name", "pattern_found", "nodes_before", "nodes_after",
                                             "params_before", "params_after", "flops_before", "flops_after")}
        rec.update(self.notes)
        return rec


def _report(name, g0, g1, dims, found=True, **notes) -> RewriteReport:
    return RewriteReport(name, len(g0), len(g1), count_params(g0), count_params(g1),
                         count_flops(g0, dims), count_flops(g1, dims), found, dict(notes))


# -- ASPP pattern ------------------------------------------------------------

@dataclass
class AsppBranch:
    rate: int | None  # None for the global-pool branch
    nodes: list[str]  # source-side first
    channels: int


@dataclass
class AsppMatch:
    source: str
    concat: str
    projection: str
    branches: list[AsppBranch]
    uses_bn: bool = False

    @property
    def rates(self) -> list[int]:
        return sorted(b.rate for b in self.branches if b.rate is not None)

    @property
    def has_pool(self) -> bool:
        return any(b.rate is None for b in self.branches)


_CHAIN_KINDS = (Conv, BatchNorm, Relu, Relu6, Upsample, GlobalAvgPool)


def _trace_branch(g: Graph, tail: str):
    """Walk single-input nodes back from ``tail`` until reaching a fan-out node."""
    chain = []
    nid = tail
    while True:
        node = g[nid]
        if not isinstance(node.kind, _CHAIN_KINDS) or len(node.inputs) != 1:
            return None, None
        chain.append(nid)
        src = node.inputs[0]
        if len(g.consumers(src)) > 1:
            return src, chain[::-1]
        if len(chain) > 12:
            return None, None
        nid = src


def _classify(g: Graph, chain: list[str]):
    kinds = [g[n].kind for n in chain]
    convs = [k for k in kinds if isinstance(k, Conv)]
    if not convs:
        return None
    first = kinds[0]
    if isinstance(first, GlobalAvgPool):
        if isinstance(kinds[-1], Upsample) and len(convs) == 1 and convs[0].spec.kernel == 1:
            return None, convs[-1].spec.out_ch
        return "bad"
    if not isinstance(first, Conv):
        return "bad"
    if any(isinstance(k, (Upsample, GlobalAvgPool)) for k in kinds):
        return "bad"
    s = first.spec
    if len(convs) == 1 and s.kernel == 1 and s.groups == 1:
        return 1, s.out_ch
    if s.kernel == 3 and s.padding == s.dilation and s.stride == 1:
        if s.depthwise and (len(convs) != 2 or convs[1].spec.kernel != 1):
            return "bad"
        return s.dilation, convs[-1].spec.out_ch
    return "bad"


def find_aspp(g: Graph) -> AsppMatch | None:
    """Locate an ASPP block: parallel conv branches off one source, joined by a
    channel concat that feeds a single 1x1 projection conv."""
    for node in g:
        if not isinstance(node.kind, ConcatChannels) or len(node.inputs) < 1:
            continue
        users = g.consumers(node.id)
        if len(users) != 1 or not isinstance(g[users[0]].kind, Conv) or g[users[0]].kind.spec.kernel != 1:
            continue
        branches, sources = [], set()
        for tail in node.inputs:
            src, chain = _trace_branch(g, tail)
            if chain is None:
                break
            cls = _classify(g, chain)
            if cls is None or cls == "bad":
                break
            sources.add(src)
            branches.append(AsppBranch(cls[0], chain, cls[1]))
        else:
            if len(sources) == 1 and len(branches) > 1:
                uses_bn = any(isinstance(g[n].kind, BatchNorm) for b in branches for n in b.nodes)
                return AsppMatch(sources.pop(), node.id, users[0], branches, uses_bn)
    return None


def aspp_summary(g: Graph) -> dict:
    m = find_aspp(g)
    if m is None:
        return {"found": False, "rates": [], "global_pool": False, "branches": 0}
    return {"found": True, "rates": m.rates, "global_pool": m.has_pool, "branches": len(m.branches)}


def _new_branch(prefix: str, src: str, in_ch: int, out_ch: int, rate: int, with_bn: bool) -> list[Node]:
    b = GraphBuilder()
    b._ids.add(src)

    def cba(pid, x, cin, cout, **kw):
        x = b.conv(pid, x, cin, cout, bias=not with_bn, **kw)
        if with_bn:
            x = b.bn(f"{pid}.bn", x, cout)
        return b.add(f"{pid}.act", Relu(), x)

    if rate == 1:
        cba(prefix, src, in_ch, out_ch)
    else:
        x = cba(f"{prefix}.dw", src, in_ch, in_ch, kernel=3, padding=rate, dilation=rate, groups=in_ch)
        cba(f"{prefix}.pw", x, in_ch, out_ch)
    return b._nodes


def optimize_aspp(g: Graph, weights: WeightStore, *, seed: int = 0, input_dims=DEFAULT_DIMS,
                  source_rates=ORIGINAL_RATES, target_rates=OPTIMIZED_RATES, strict: bool = False):
    """Rewrite rates [1,3,6,9] + global pooling into rates [1,5,9].

    Retained branches keep their weights; new branches and the new slices of
    the projection kernel are freshly initialized from ``seed``.  A repeated
    target rate (the four-branch reading ``(1, 5, 5, 9)``) adds a second
    branch.  On a pattern miss the inputs come back unchanged with
    ``pattern_found=False`` (or :class:`PatternMissError` when ``strict``).
    """
    m = find_aspp(g)
    if m is None or m.rates != sorted(source_rates) or not m.has_pool:
        if strict:
            raise PatternMissError("no ASPP block with rates %s and global pooling" % (list(source_rates),))
        return g, weights, _report("aspp", g, g, input_dims, found=False)

    rng = np.random.default_rng(seed)
    by_rate = {b.rate: b for b in m.branches if b.rate is not None}
    first_conv = next(g[n].kind.spec for n in m.branches[0].nodes if isinstance(g[n].kind, Conv))
    in_ch = first_conv.in_ch
    width = m.branches[0].channels
    prefix = m.concat.rsplit(".", 1)[0] if "." in m.concat else m.concat

    # column offset of each old branch inside the projection input
    offsets, off = {}, 0
    for b in m.branches:
        offsets[id(b)] = (off, b.channels)
        off += b.channels

    drop = {n for b in m.branches if b.rate not in target_rates for n in b.nodes}
    extra: list[Node] = []
    tails, blocks = [], []
    targets = sorted(target_rates)
    reused = set()
    for r, pid in zip(targets, branch_ids(targets, prefix)):
        if r in by_rate and r not in reused:
            reused.add(r)
            br = by_rate[r]
            tails.append(br.nodes[-1])
            o, c = offsets[id(br)]
            blocks.append(("keep", o, c))
        else:
            nodes = _new_branch(pid, m.source, in_ch, width, r, m.uses_bn)
            taken = set(g.nodes)
            if any(n.id in taken for n in nodes):
                raise StructureError(f"node ids for new rate-{r} branch already exist")
            extra += nodes
            tails.append(nodes[-1].id)
            blocks.append(("new", 0, width))

    proj = g[m.projection]
    old_spec = proj.kind.spec
    new_in = sum(c for _, _, c in blocks)
    new_spec = replace(old_spec, in_ch=new_in)
    new_proj = replace(proj, kind=replace(proj.kind, spec=new_spec))
    new_concat = replace(g[m.concat], inputs=tuple(tails))
    g2 = rewire(g, drop, {}, extra, {m.concat: new_concat, m.projection: new_proj})

    dropped = {w for n in drop for w in g[n].weights}
    ws = WeightStore((k, v) for k, v in weights.items() if k not in dropped)
    for node in extra:
        ws.update(init_node_weights(node, rng))
    old_w = weights[proj.weights[0]]
    fresh = he_normal(rng, new_spec.weight_shape)
    parts, col = [], 0
    for kind, o, c in blocks:
        parts.append(old_w[:, o:o + c] if kind == "keep" else fresh[:, col:col + c])
        col += c
    ws[proj.weights[0]] = np.concatenate(parts, axis=1)

    report = _report("aspp", g, g2, input_dims, branches_before=len(m.branches),
                     branches_after=len(tails), rates_before=_fmt(m.rates, m.has_pool),
                     rates_after=_fmt(sorted(target_rates), False))
    if output_shapes(g, input_dims) != output_shapes(g2, input_dims):
        raise StructureError("ASPP rewrite changed output shapes")
    return g2, ws, report


def _fmt(rates, pool) -> str:
    return "[" + ",".join(map(str, rates)) + ("]+pool" if pool else "]")


# -- batch-norm folding ------------------------------------------------------

def fold_batchnorm_pass(g: Graph, weights: WeightStore, *, input_dims=DEFAULT_DIMS):
    """Fold every Conv -> BatchNorm pair into a single biased Conv."""
    bns = [n for n in g if isinstance(n.kind, BatchNorm)]
    if not bns:
        return g, weights, _report("bn-fold", g, g, input_dims, folded=0)
    drop, redirect, swaps = set(), {}, {}
    ws = WeightStore(weights.items())
    for bn in bns:
        conv = g[bn.inputs[0]]
        if not isinstance(conv.kind, Conv):
            raise StructureError(f"batch norm {bn.id!r} is not preceded by a conv (found {type(conv.kind).__name__})")
        if len(g.consumers(conv.id)) != 1:
            raise StructureError(f"conv {conv.id!r} feeds {bn.id!r} and other nodes; cannot fold")
        p = BnParams(*(weights[w] for w in bn.weights), epsilon=bn.kind.eps)
        bias = weights[conv.weights[1]] if conv.kind.bias else None
        w_f, b_f = kernels.fold_bn(weights[conv.weights[0]], bias, p)
        kind = Conv(conv.kind.spec, bias=True)
        swaps[conv.id] = Node(conv.id, kind, conv.inputs, weight_names_for(conv.id, kind))
        ws[swaps[conv.id].weights[0]] = w_f
        ws[swaps[conv.id].weights[1]] = b_f
        for name in bn.weights:
            del ws[name]
        drop.add(bn.id)
        redirect[bn.id] = conv.id
    g2 = rewire(g, drop, redirect, (), swaps)
    return g2, ws, _report("bn-fold", g, g2, input_dims, folded=len(bns))


PASSES = {"aspp": optimize_aspp, "bn-fold": fold_batchnorm_pass}


def run_passes(g: Graph, weights: WeightStore, names, *, seed: int = 0, input_dims=DEFAULT_DIMS):
    reports = []
    for name in names:
        if name not in PASSES:
            raise ValueError(f"unknown pass {name!r}; choose from {sorted(PASSES)}")
        kw = {"seed": seed} if name == "aspp" else {}
        g, weights, rep = PASSES[name](g, weights, input_dims=input_dims, **kw)
        reports.append(rep)
    return g, weights, reports
