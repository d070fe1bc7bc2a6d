from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdesnet import kernels
from hdesnet.errors import MissingWeightError, NumericError, ShapeError, StructureError
from hdesnet.graph import (Add, BatchNorm, ConcatChannels, Conv, Graph, GraphBuilder, Input, Node, Output, Relu,
                           Relu6, Upsample, count_flops, count_macs, count_params, execute, infer_shapes,
                           output_shapes, parse_manifest, to_manifest)
from hdesnet.kernels import BnParams, ConvSpec
from hdesnet.model_io import init_weights, weights_to_bytes
from hdesnet.net_builder import build_hdesnet
from hdesnet.tensor import Tensor, elementwise_add


def identity_graph():
    b = GraphBuilder()
    b.output("y", b.input())
    return b.build()


def test_identity_shapes_and_execution(rng):
    g = identity_graph()
    shapes = infer_shapes(g, (1, 3, 224, 224))
    assert set(shapes.values()) == {(1, 3, 224, 224)}
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    assert execute(g, {}, x)["y"].equal(x)


def test_stem_conv_shape():
    b = GraphBuilder()
    c = b.conv("c", b.input(), 3, 32, 3, 2, 1)
    b.output("y", c)
    shapes = infer_shapes(b.build(), (1, 3, 224, 224))
    # (224 + 2 - 3) // 2 + 1
    assert shapes["c"] == (1, 32, (224 + 2 * 1 - 3) // 2 + 1, 112)


def test_full_network_output_shapes():
    assert output_shapes(build_hdesnet(), (1, 3, 224, 224)) == {
        "depth": (1, 1, 112, 112), "segmentation": (1, 2, 112, 112)}


def test_identity_conv_graph(rng):
    b = GraphBuilder()
    b.output("y", b.conv("c", b.input(), 2, 2))
    g = b.build()
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    out = execute(g, {"c.weight": np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)}, x)
    assert out["y"].equal(x)


def five_node_graph():
    b = GraphBuilder()
    x = b.input()
    c = b.conv("c", x, 3, 4, 3, 1, 1)
    n = b.bn("bn", c, 4)
    r = b.add("act", Relu6(), n)
    b.output("y", r)
    return b.build()


def test_five_node_graph_matches_manual_chain(rng):
    g = five_node_graph()
    ws = init_weights(g, 3)
    ws["bn.mean"] = rng.normal(0, 0.2, 4).astype(np.float32)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)))
    y = kernels.conv2d(x, ws["c.weight"], None, ConvSpec(3, 4, 3, 1, 1))
    y = kernels.batchnorm_infer(y, BnParams(ws["bn.gamma"], ws["bn.beta"], ws["bn.mean"], ws["bn.var"]))
    y = kernels.relu6(y)
    assert execute(g, ws, x)["y"].equal(y)


def test_missing_weight(rng):
    g = five_node_graph()
    ws = init_weights(g, 0)
    del ws["bn.var"]
    with pytest.raises(MissingWeightError):
        execute(g, ws, Tensor(rng.standard_normal((1, 3, 4, 4))))


@pytest.mark.filterwarnings("ignore:overflow")
def test_numeric_error_names_node():
    g = five_node_graph()
    ws = init_weights(g, 0)
    ws["c.weight"] = np.full((4, 3, 3, 3), np.float32(3e38))
    with pytest.raises(NumericError, match="'c'"):
        execute(g, ws, Tensor(np.ones((1, 3, 4, 4))))


def test_shape_error_names_node():
    b = GraphBuilder()
    b.output("y", b.conv("bad", b.input(), 5, 1))
    with pytest.raises(ShapeError, match="bad"):
        infer_shapes(b.build(), (1, 3, 8, 8))


def test_structure_errors():
    with pytest.raises(StructureError):
        Graph([Node("a", Relu(), ("b",)), Node("b", Relu(), ("a",)), Node("i", Input())])
    with pytest.raises(StructureError):
        Graph([Node("x", Relu(), ("nowhere",)), Node("i", Input())])
    with pytest.raises(StructureError):
        Graph([Node("i", Input()), Node("j", Input())])
    with pytest.raises(StructureError):
        Graph([Node("i", Input()), Node("a", Add(), ("i",))])


def test_flops_pointwise():
    b = GraphBuilder()
    b.output("y", b.conv("c", b.input(), 1, 1))
    g = b.build()
    assert count_macs(g, (1, 1, 4, 4)) == 16
    assert count_flops(g, (1, 1, 4, 4)) == 32


def test_flops_depthwise_closed_form():
    b = GraphBuilder()
    b.output("y", b.conv("dw", b.input(), 32, 32, 3, 1, 1, 1, 32))
    assert count_macs(b.build(), (1, 32, 112, 112)) == 32 * 112 * 112 * 9


def test_flops_counts_elementwise():
    g = five_node_graph()
    out_elems = 4 * 6 * 6
    assert count_flops(g, (1, 3, 6, 6)) == 2 * out_elems * 27 + out_elems + out_elems


def test_params_match_initialized_store_bytes():
    g = build_hdesnet()
    ws = init_weights(g, 0)
    raw = weights_to_bytes(ws)
    header = 12 + sum(2 + len(k.encode()) + 1 + 4 * v.ndim for k, v in ws.items())
    assert (len(raw) - header) // 4 == count_params(g)


def test_manifest_round_trip():
    g = build_hdesnet()
    text = to_manifest(g)
    g2 = parse_manifest(text)
    assert to_manifest(g2) == text
    assert [n for n in g] == [n for n in g2]
    assert "depth" in g2.outputs and "segmentation" in g2.outputs


def test_concurrent_execution(small_net, rng):
    g, ws = small_net
    xs = [Tensor(rng.random((1, 3, 64, 64))) for _ in range(3)]
    serial = [execute(g, ws, x)["segmentation"] for x in xs]
    with ThreadPoolExecutor(3) as pool:
        par = list(pool.map(lambda x: execute(g, ws, x)["segmentation"], xs))
    assert all(a.equal(b) for a, b in zip(serial, par))


def test_repeated_execution_bitwise(small_net, rng):
    g, ws = small_net
    x = Tensor(rng.random((1, 3, 64, 64)))
    a, b = execute(g, ws, x), execute(g, ws, x)
    assert all(a[k].equal(b[k]) for k in a)


# -- random graphs -----------------------------------------------------------------

@st.composite
def random_graphs(draw):
    """Small DAGs mixing every node kind, channel count fixed at 2."""
    b = GraphBuilder()
    ids = [b.input()]
    n_ops = draw(st.integers(1, 7))
    for i in range(n_ops):
        op = draw(st.sampled_from(["conv", "dw", "bn", "relu", "relu6", "add", "cat"]))
        src = draw(st.sampled_from(ids))
        nid = f"n{i}"
        if op == "conv":
            b.conv(nid, src, 2, 2, 3, 1, draw(st.sampled_from([1, 2])), draw(st.sampled_from([1, 2])))
            # keep the spatial size: padding == dilation for k=3
            b._nodes[-1] = _same_pad(b._nodes[-1])
        elif op == "dw":
            b.conv(nid, src, 2, 2, 3, 1, 1, 1, 2)
        elif op == "bn":
            b.bn(nid, src, 2)
        elif op in ("relu", "relu6"):
            b.add(nid, Relu() if op == "relu" else Relu6(), src)
        elif op == "add":
            b.add(nid, Add(), src, draw(st.sampled_from(ids)))
        else:
            cat = b.add(nid + "c", ConcatChannels(), src, draw(st.sampled_from(ids)))
            b.conv(nid, cat, 4, 2)
        ids.append(nid)
    up = b.add("up", Upsample(draw(st.integers(1, 3))), ids[-1])
    b.output("y", up)
    b.output("z", draw(st.sampled_from(ids)))
    return b.build()


def _same_pad(node):
    from dataclasses import replace
    s = node.kind.spec
    return replace(node, kind=Conv(replace(s, padding=s.dilation)))


@settings(max_examples=25, deadline=None)
@given(random_graphs(), st.integers(0, 1000))
def test_random_graph_shapes_match_execution(g, seed):
    ws = init_weights(g, seed)
    x = Tensor(np.random.default_rng(seed).random((1, 2, 5, 6)))
    shapes = infer_shapes(g, x.shape)
    out = execute(g, ws, x, keep=[n.id for n in g])
    for nid, t in out.items():
        if nid in shapes:
            assert t.shape == shapes[nid]


@settings(max_examples=25, deadline=None)
@given(random_graphs(), st.integers(0, 1000))
def test_result_independent_of_topological_order(g, seed):
    ws = init_weights(g, seed)
    x = Tensor(np.random.default_rng(seed).random((1, 2, 5, 6)))
    a = execute(g, ws, x)
    # reversed insertion order changes Kahn tie-breaking but not dataflow
    g2 = Graph(reversed(list(g)))
    b = execute(g2, ws, x)
    assert all(a[k].equal(b[k]) for k in a)


def test_add_node_is_elementwise_add(rng):
    b = GraphBuilder()
    i = b.input()
    r = b.add("r", Relu(), i)
    b.output("y", b.add("s", Add(), i, r))
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    assert execute(b.build(), {}, x)["y"].equal(elementwise_add(x, kernels.relu(x)))


def test_bn_node_default_eps():
    assert BatchNorm(3).eps == kernels.BN_EPS
    assert Output("depth").name == "depth"
