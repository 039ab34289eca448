import csv
import io
import json

import numpy as np
import pytest

from mdlkit.analysis import (COLUMNS, compare_schemes, count_connections, count_macs, count_params, node_macs,
                             partition_sides)
from mdlkit.graph import INPUT, Graph, Node, _Builder, apply_scheme, build_micro, build_resnet26
from mdlkit.blocks import BlockSpec, init_block

from oracles import brute_connections, brute_macs, brute_param_counts, conv_loop, random_micro_graph


@pytest.fixture(scope="module")
def resnet():
    return build_resnet26(num_classes=47)


def toy_graph():
    b = _Builder(0)
    c = b.conv("conv", INPUT, 3, 4, 3, bias=True)
    r = b.op("relu", "relu", b.bn("bn", c, 4))
    p = b.op("pool", "pool", r, axes="spatial", mode="avg")
    b.dense("fc", p, 4, 2)
    return Graph((3, 8, 8), b.nodes, "fc")


def test_toy_param_counts():
    p = count_params(toy_graph())
    assert (p.total, p.total_wo_fc) == (130, 120)
    assert 3 * 4 * 9 + 4 == 112


def test_conv_macs_closed_form_and_loop_count():
    b = _Builder(0)
    b.conv("c", INPUT, 3, 8, 3, 1, 1)
    b.dense("fc", b.op("p", "pool", "c", axes="spatial", mode="avg"), 8, 2)
    g = Graph((3, 16, 16), b.nodes, "fc")
    assert node_macs(g)["c"] == 8 * 16 * 16 * 3 * 9 == 55_296
    x = np.random.default_rng(0).standard_normal((1, 3, 16, 16))
    assert conv_loop(x, g.node("c").params["weight"], None, 1, 1)[1] == 55_296


def test_toy_attention_connections():
    blk_spec = BlockSpec("spatial-attention", 2, k=3)
    b = _Builder(0)
    b._add(Node("att", "attention-block", [INPUT], dict(sub="spatial", channels=2, k=3),
                init_block(blk_spec, np.random.default_rng(0)), trainable=True))
    # frozen trunk on both sides of the block
    c = b.conv("frozen", "att", 2, 2, 1, padding=0)
    p = b.op("pool", "pool", c, axes="spatial", mode="avg")
    b.dense("fc", p, 2, 2)
    b.nodes[-1].trainable = False
    g = Graph((2, 2, 2), b.nodes, "fc")
    assert count_connections(g).connections == 2 * 8


@pytest.mark.parametrize("seed", range(10))
def test_counting_oracles_on_random_graphs(seed):
    g = random_micro_graph(seed)
    assert len(g.nodes) <= 10
    p = count_params(g)
    assert (p.total, p.trainable, p.total_wo_fc, p.trainable_wo_fc) == brute_param_counts(g)
    assert count_macs(g).macs_total == brute_macs(g)
    assert count_connections(g).connections == brute_connections(g)


def test_finetune_pct_is_100_on_every_backbone():
    for g in (build_micro((8, 8, 16), 1, 3), build_resnet26(10)):
        assert count_params(apply_scheme(g, "finetune")).trainable_pct == 100.0


def test_total_wo_fc_differs_only_by_inserted_params():
    base = build_micro((16, 16, 32), 1, 3)
    ref = count_params(apply_scheme(base, "finetune")).total_wo_fc
    for v in ("parallel-adapters", "adaptive-attention", "cbam", "serial-adapters"):
        g = apply_scheme(base, v)
        inserted = sum(a.size for n in g.nodes if n.inserted for a in n.params.values())
        assert count_params(g).total_wo_fc - ref == inserted


def test_mac_delta_ordering_and_nonnegative():
    base = build_micro((16, 32, 32), 1, 3)
    ad = count_macs(apply_scheme(base, "adaptive-attention"))
    pa = count_macs(apply_scheme(base, "parallel-adapters"))
    assert 0 <= ad.macs_delta < pa.macs_delta
    assert count_macs(apply_scheme(base, "finetune")).macs_delta == 0


def test_connections_ignore_weight_values():
    g = apply_scheme(build_micro((8, 8, 16), 1, 3), "spatial-attention")
    before = count_connections(g)
    for n in g.nodes:
        for v in n.params.values():
            v[...] = np.random.default_rng(0).standard_normal(v.shape)
    assert count_connections(g) == before


def test_no_boundary_means_no_connections():
    g = build_micro((8, 8, 8), 1, 3)
    for n in g.nodes:
        n.trainable = False
    assert count_connections(g).connections == 0
    assert all(not s for s in partition_sides(g).values())


# --------------------------------------------------------------------------
# calibrated ResNet26 numbers


def test_resnet26_table(resnet):
    t = compare_schemes(resnet, ["finetune", "final-conv", "parallel-adapters", "spatial-attention",
                                 "adaptive-attention"], num_classes=47)
    ft, fc, pa, sa, aa = t.rows
    assert ft.trainable_pct == 100.0 and ft.connections == 3 * 72 * 72
    assert abs(fc.trainable_wo_fc - 597_000) <= 0.02 * 597_000
    assert abs(pa.trainable_wo_fc - 653_000) <= 0.02 * 653_000
    assert abs(sa.trainable_wo_fc - 8_000) <= 1_000 and abs(aa.trainable_wo_fc - 9_000) <= 1_000
    expected = 2 * (64 * 36 ** 2 + 128 * 18 ** 2 + 256 * 9 ** 2)
    assert abs(aa.connections - expected) <= 0.05 * expected
    assert aa.macs_delta <= 10_000_000
    assert abs(pa.macs_delta / pa.conv_macs_base - 1 / 9) <= 0.01 / 9


def test_table_formats_are_deterministic_and_parse(resnet):
    a = compare_schemes(resnet, ["finetune", "adaptive-attention"], num_classes=47)
    b = compare_schemes(resnet, ["finetune", "adaptive-attention"], num_classes=47)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert tuple(rows[0]) == COLUMNS and rows[1][0] == "finetune" and rows[1][7] == "100.00"
    doc = json.loads(a.to_json())
    assert doc["rows"][1]["method"] == "adaptive-attention"
    assert doc["rows"][1]["display"]["Train. w/o FC"] == "9 k"
    assert a.to_csv().endswith("\n")
