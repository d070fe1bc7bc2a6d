import numpy as np
import pytest

from hdesnet.errors import PatternMissError, StructureError
from hdesnet.graph import BatchNorm, GraphBuilder, Relu, count_flops, count_params, execute, output_shapes, to_manifest
from hdesnet.model_io import init_weights, randomize_batchnorm
from hdesnet.net_builder import AsppConfig, HdesConfig, build_hdesnet
from hdesnet.optim_pass import (aspp_summary, find_aspp, fold_batchnorm_pass, optimize_aspp, run_passes)
from hdesnet.tensor import Tensor

DIMS = (1, 3, 64, 64)


@pytest.fixture(scope="module")
def optimized(small_net):
    g, ws = small_net
    return optimize_aspp(g, ws, input_dims=DIMS)


def test_detects_original_pattern(small_net):
    g, _ = small_net
    assert aspp_summary(g) == {"found": True, "rates": [1, 3, 6, 9], "global_pool": True, "branches": 5}


def test_rewrite_report(small_net, optimized):
    g, _ = small_net
    g2, ws2, rep = optimized
    assert rep.pattern_found
    assert rep.notes["branches_before"] == 5 and rep.notes["branches_after"] == 3
    assert rep.params_after < rep.params_before == count_params(g)
    assert rep.flops_after < rep.flops_before
    assert rep.params_after == count_params(g2)
    assert aspp_summary(g2) == {"found": True, "rates": [1, 5, 9], "global_pool": False, "branches": 3}


def test_rewrite_keeps_output_shapes(small_net, optimized):
    assert output_shapes(small_net[0], DIMS) == output_shapes(optimized[0], DIMS)


def test_retained_weights_transplanted(small_net, optimized):
    g, ws = small_net
    _, ws2, _ = optimized
    for name in ("aspp.r1.weight", "aspp.r9.dw.weight", "aspp.r9.pw.weight", "enc.b5.dw.weight"):
        assert np.array_equal(ws[name], ws2[name])
    old, new = ws["aspp.proj.weight"], ws2["aspp.proj.weight"]
    assert new.shape == (256, 768, 1, 1)
    # concat order was [r1, r3, r6, r9, pool]; now [r1, r5, r9]
    assert np.array_equal(new[:, :256], old[:, :256])
    assert np.array_equal(new[:, 512:], old[:, 768:1024])
    assert "aspp.r5.dw.weight" in ws2 and "aspp.r3.dw.weight" not in ws2


def test_pattern_miss_on_optimized_form(optimized):
    g2, ws2, _ = optimized
    g3, ws3, rep = optimize_aspp(g2, ws2, input_dims=DIMS)
    assert not rep.pattern_found
    assert g3 is g2 and ws3 is ws2
    assert rep.nodes_after == rep.nodes_before
    with pytest.raises(PatternMissError):
        optimize_aspp(g2, ws2, input_dims=DIMS, strict=True)


def test_idempotent(small_net, optimized):
    g, ws = small_net
    g2, ws2, _ = optimized
    g3, ws3, _ = optimize_aspp(g2, ws2, input_dims=DIMS)
    assert to_manifest(g3) == to_manifest(g2) and ws3.equal(ws2)


def test_matches_builder_optimized_graph(optimized, rng):
    g2, ws2, _ = optimized
    built = build_hdesnet(HdesConfig.optimized(input_hw=(64, 64)))
    assert built.weight_shapes() == g2.weight_shapes()
    x = Tensor(rng.random(DIMS))
    a, b = execute(g2, ws2, x), execute(built, ws2, x)
    assert all(a[k].equal(b[k]) for k in a)


def test_no_aspp_found_in_plain_graph():
    b = GraphBuilder()
    b.output("y", b.add("r", Relu(), b.input()))
    assert find_aspp(b.build()) is None


# -- batch-norm folding ---------------------------------------------------------

def test_fold_no_bn_is_noop():
    b = GraphBuilder()
    b.output("y", b.conv("c", b.input(), 2, 2))
    g = b.build()
    ws = init_weights(g, 0)
    g2, ws2, rep = fold_batchnorm_pass(g, ws, input_dims=(1, 2, 4, 4))
    assert g2 is g and ws2 is ws
    assert (rep.nodes_before, rep.params_before, rep.flops_before) == (rep.nodes_after, rep.params_after,
                                                                        rep.flops_after)


def test_fold_single_chain(rng):
    b = GraphBuilder()
    b.output("y", b.bn("bn", b.conv("c", b.input(), 3, 4, 3, 1, 1), 4))
    g = b.build()
    ws = randomize_batchnorm(g, init_weights(g, 0), 1)
    g2, ws2, rep = fold_batchnorm_pass(g, ws, input_dims=(1, 3, 8, 8))
    assert len(g2) == len(g) - 1 and rep.notes["folded"] == 1
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    np.testing.assert_allclose(execute(g2, ws2, x)["y"].array, execute(g, ws, x)["y"].array, atol=1e-4)


def test_fold_full_network_node_census(small_net, rng):
    g, ws = small_net
    n_bn = g.count(BatchNorm)
    g2, ws2, rep = fold_batchnorm_pass(g, ws, input_dims=DIMS)
    assert len(g2) == len(g) - n_bn and g2.count(BatchNorm) == 0
    assert rep.flops_after < rep.flops_before
    for _ in range(5):
        x = Tensor(rng.random(DIMS))
        a, b = execute(g, ws, x), execute(g2, ws2, x)
        for k in a:
            np.testing.assert_allclose(b[k].array, a[k].array, atol=1e-4)


def test_fold_orphan_bn():
    b = GraphBuilder()
    b.output("y", b.bn("bn", b.add("r", Relu(), b.input()), 2))
    g = b.build()
    with pytest.raises(StructureError, match="not preceded by a conv"):
        fold_batchnorm_pass(g, init_weights(g, 0), input_dims=(1, 2, 3, 3))


def test_fold_shared_conv():
    b = GraphBuilder()
    c = b.conv("c", b.input(), 2, 2)
    b.output("y", b.bn("bn", c, 2))
    b.output("z", c)
    g = b.build()
    with pytest.raises(StructureError, match="cannot fold"):
        fold_batchnorm_pass(g, init_weights(g, 0), input_dims=(1, 2, 3, 3))


def test_both_passes_reduce_flops_and_keep_outputs(small_net):
    g, ws = small_net
    g2, _, reports = run_passes(g, ws, ["aspp", "bn-fold"], input_dims=DIMS)
    assert all(r.flops_after < r.flops_before for r in reports)
    assert count_flops(g2, DIMS) < count_flops(g, DIMS)
    assert output_shapes(g2, DIMS) == output_shapes(g, DIMS)


def test_report_text_and_record(optimized):
    rep = optimized[2]
    text = rep.to_text()
    assert "pass=aspp\n" in text and "rates_after=[1,5,9]" in text
    rec = rep.to_record()
    assert rec["nodes_before"] > rec["nodes_after"]


def test_unknown_pass(small_net):
    with pytest.raises(ValueError):
        run_passes(*small_net, ["nope"])


def test_four_branch_target(small_net, rng):
    g, ws = small_net
    g2, ws2, rep = optimize_aspp(g, ws, input_dims=DIMS, target_rates=(1, 5, 5, 9))
    assert aspp_summary(g2) == {"found": True, "rates": [1, 5, 5, 9], "global_pool": False, "branches": 4}
    assert rep.notes["branches_after"] == 4 and rep.params_after < rep.params_before
    built = build_hdesnet(HdesConfig(input_hw=(64, 64), aspp=AsppConfig((1, 5, 5, 9), include_global_pool=False)))
    assert built.weight_shapes() == g2.weight_shapes()
    x = Tensor(rng.random(DIMS))
    a, b = execute(g2, ws2, x), execute(built, ws2, x)
    assert all(a[k].equal(b[k]) for k in a)
