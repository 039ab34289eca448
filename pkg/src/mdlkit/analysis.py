"""Static cost accounting for scheme-applied graphs.

Three counts per graph: learnable parameters (with and without the FC head),
multiply-accumulates, and interconnections, meaning the scalars that cross
between the frozen trunk and the trainable modules in one forward pass.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .blocks import block_macs
from .graph import INPUT, Graph, Scheme, apply_scheme, build_backbone, infer_shapes


@dataclass(frozen=True)
class ParamReport:
    total: int
    trainable: int
    total_wo_fc: int
    trainable_wo_fc: int
    base_count: int
    trainable_pct: float
    pct_of_base: float


@dataclass(frozen=True)
class CostReport:
    macs_total: int
    macs_base: int
    macs_delta: int
    conv_macs_base: int


@dataclass(frozen=True)
class ConnectivityReport:
    connections: int
    tap_outs: int  # frozen -> trainable
    tap_ins: int  # trainable -> frozen


def _count(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def count_params(g: Graph) -> ParamReport:
    """Parameter totals from the node hyperparameters.

    ``trainable_pct`` is relative to this graph's own non-FC total;
    ``pct_of_base`` is relative to the backbone alone (inserted modules removed).
    """
    total = trainable = total_wo_fc = trainable_wo_fc = inserted = 0
    for n in g.nodes:
        c = sum(_count(s) for s in n.param_shapes().values())
        total += c
        if n.trainable:
            trainable += c
        if not n.is_fc_head:
            total_wo_fc += c
            if n.trainable:
                trainable_wo_fc += c
            if n.inserted:
                inserted += c
    base = total_wo_fc - inserted
    pct = 100.0 * trainable_wo_fc / total_wo_fc if total_wo_fc else 0.0
    pct_base = 100.0 * trainable_wo_fc / base if base else 0.0
    return ParamReport(total, trainable, total_wo_fc, trainable_wo_fc, base, pct, pct_base)


def node_macs(g: Graph, input_shape=None) -> dict[str, int]:
    shapes = infer_shapes(g, input_shape)
    out = {}
    for n in g.nodes:
        h = n.hyper
        if n.kind == "conv":
            co, ho, wo = shapes[n.id]
            out[n.id] = co * ho * wo * (h["in_ch"] // h.get("groups", 1)) * h["k"] * h["k"]
        elif n.kind == "dense":
            out[n.id] = h["in_features"] * h["out_features"]
        elif n.kind in ("adapter-block", "attention-block"):
            out[n.id] = block_macs(n.block_spec(), shapes[n.inputs[0]])
        else:
            out[n.id] = 0
    return out


def count_macs(g: Graph, input_shape=None) -> CostReport:
    """Conv and dense multiply-accumulates; the delta is what inserted modules add."""
    macs = node_macs(g, input_shape)
    total = sum(macs.values())
    inserted = sum(macs[n.id] for n in g.nodes if n.inserted)
    conv_base = sum(macs[n.id] for n in g.nodes if n.kind == "conv" and not n.inserted)
    return CostReport(total, total - inserted, inserted, conv_base)


def partition_sides(g: Graph) -> dict[str, bool]:
    """Which side (True = trainable) each tensor is produced on.

    Convolutions, dense layers and inserted blocks sit where their trainable
    flag puts them. Batchnorm and parameter-free nodes are folded into the
    side of their first input; the input image arrives on the frozen side.
    """
    side = {INPUT: False}
    for n in g.nodes:
        if n.kind in ("conv", "dense", "adapter-block", "attention-block"):
            side[n.id] = n.trainable
        else:
            side[n.id] = side[n.inputs[0]]
    return side


def count_connections(g: Graph, input_shape=None) -> ConnectivityReport:
    """Scalars crossing the frozen/trainable boundary, each tensor once per direction."""
    shapes = infer_shapes(g, input_shape)
    side = partition_sides(g)
    crossing: dict[str, int] = {}
    for n in g.nodes:
        for src in n.inputs:
            if side[src] != side[n.id]:
                crossing[src] = _count(shapes[src])
    outs = sum(v for k, v in crossing.items() if not side[k])
    ins = sum(v for k, v in crossing.items() if side[k])
    return ConnectivityReport(outs + ins, outs, ins)


# --------------------------------------------------------------------------
# comparison tables

COLUMNS = ("Method", "Giga MACs", "Delta", "Total", "Train.", "Total w/o FC", "Train. w/o FC", "Train. %",
           "Conn.s")


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    macs_total: int
    macs_delta: int
    conv_macs_base: int
    total: int
    trainable: int
    total_wo_fc: int
    trainable_wo_fc: int
    trainable_pct: float
    connections: int


def _kilo(n: int) -> str:
    return f"{round(n / 1000):,} k"


@dataclass
class ComparisonTable:
    backbone: str
    input_shape: tuple[int, int, int]
    num_classes: int
    rows: list[ComparisonRow]

    def row(self, method: str) -> ComparisonRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.method, f"{r.macs_total / 1e9:.2f}", f"{r.macs_delta / 1e9:.2f}", r.total, r.trainable,
                        r.total_wo_fc, r.trainable_wo_fc, f"{r.trainable_pct:.2f}", r.connections])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "backbone": self.backbone,
            "input": list(self.input_shape),
            "num_classes": self.num_classes,
            "mac_convention": "conv and dense multiply-accumulates only",
            "rows": [dict(asdict(r), display={
                "Giga MACs": f"{r.macs_total / 1e9:.2f}", "Delta": f"{r.macs_delta / 1e9:.2f}",
                "Total": _kilo(r.total), "Train.": _kilo(r.trainable), "Total w/o FC": _kilo(r.total_wo_fc),
                "Train. w/o FC": _kilo(r.trainable_wo_fc), "Train. %": f"{r.trainable_pct:.2f}",
                "Conn.s": _kilo(r.connections)}) for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def compare_schemes(backbone: str | Graph, schemes, input_shape=None, num_classes: int = 47,
                    seed: int = 0) -> ComparisonTable:
    """One row per scheme, in the order given."""
    if isinstance(backbone, Graph):
        base, name = backbone, backbone.name
    else:
        base, name = build_backbone(backbone, num_classes, input_shape, seed=seed), backbone
    shape = tuple(input_shape or base.input_shape)
    rows = []
    for s in schemes:
        s = Scheme.parse(s) if isinstance(s, str) else s
        g = apply_scheme(base, s, seed=seed)
        p = count_params(g)
        m = count_macs(g, shape)
        c = count_connections(g, shape)
        rows.append(ComparisonRow(s.variant, m.macs_total, m.macs_delta, m.conv_macs_base, p.total, p.trainable,
                                  p.total_wo_fc, p.trainable_wo_fc, p.trainable_pct, c.connections))
    return ComparisonTable(name, shape, base.head().hyper["out_features"], rows)
