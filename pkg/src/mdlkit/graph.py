"""Architecture graphs, backbone builders, and trainable-scheme application.

A ``Graph`` is an ordered list of nodes (already topologically sorted) whose
``inputs`` name upstream node ids; the pseudo-id ``"input"`` is the image
batch. Parameters live on the nodes as numpy arrays. ``apply_scheme`` returns
a new graph with modules inserted and the frozen/trainable flags assigned.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import load_container, save_container
from .blocks import BlockSpec, apply_block, init_block

INPUT = "input"
PARAM_KINDS = ("conv", "batchnorm", "dense", "adapter-block", "attention-block")
NODE_KINDS = PARAM_KINDS + ("relu", "sigmoid", "pool", "add", "mul")

ADAPTER_VARIANTS = ("serial-adapters", "parallel-adapters")
ATTENTION_VARIANTS = ("channel-attention", "spatial-attention", "adaptive-attention", "cbam")
SCHEME_VARIANTS = ("finetune", "final-conv", "head-only") + ADAPTER_VARIANTS + ATTENTION_VARIANTS


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    hyper: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: bool = False
    is_fc_head: bool = False

    @property
    def inserted(self) -> bool:
        return bool(self.hyper.get("inserted", False))

    def block_spec(self) -> BlockSpec:
        h = self.hyper
        if self.kind == "adapter-block":
            return BlockSpec(f"{h['sub']}-adapter", h["channels"], out_channels=h["out_channels"],
                             bias=h.get("bias", False), stride=h.get("stride", 1))
        if self.kind == "attention-block":
            kind = "cbam" if h["sub"] == "cbam" else f"{h['sub']}-attention"
            return BlockSpec(kind, h["channels"], k=h.get("k", 7), r=h.get("r", 16))
        raise GraphError(f"node {self.id!r}: kind {self.kind!r} is not a block")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes implied by the hyperparameters."""
        h = self.hyper
        if self.kind == "conv":
            shapes = {"weight": (h["out_ch"], h["in_ch"] // h.get("groups", 1), h["k"], h["k"])}
            if h.get("bias", False):
                shapes["bias"] = (h["out_ch"],)
            return shapes
        if self.kind == "batchnorm":
            return {"gamma": (h["channels"],), "beta": (h["channels"],)}
        if self.kind == "dense":
            shapes = {"weight": (h["in_features"], h["out_features"])}
            if h.get("bias", True):
                shapes["bias"] = (h["out_features"],)
            return shapes
        if self.kind in ("adapter-block", "attention-block"):
            return self.block_spec().param_shapes()
        return {}

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "batchnorm":
            c = self.hyper["channels"]
            return {"running_mean": (c,), "running_var": (c,)}
        return {}


@dataclass(frozen=True)
class Scheme:
    variant: str
    placement: str | None = None
    batchnorm_trainable: bool | None = None
    k: int = 7
    r: int = 16
    adapter_bias: bool = False

    def __post_init__(self):
        if self.variant not in SCHEME_VARIANTS:
            raise ValueError(f"unknown scheme {self.variant!r}; valid schemes: {', '.join(SCHEME_VARIANTS)}")
        if self.placement is None:
            default = ("per-conv" if self.variant in ADAPTER_VARIANTS
                       else "per-stage" if self.variant in ATTENTION_VARIANTS else None)
            object.__setattr__(self, "placement", default)
        if self.variant in ADAPTER_VARIANTS and self.placement != "per-conv":
            raise ValueError(f"{self.variant} requires per-conv placement, got {self.placement!r}")
        if self.variant in ATTENTION_VARIANTS and self.placement != "per-stage":
            raise ValueError(f"{self.variant} requires per-stage placement, got {self.placement!r}")
        if self.variant not in ADAPTER_VARIANTS + ATTENTION_VARIANTS and self.placement is not None:
            raise ValueError(f"{self.variant} inserts no modules; placement must be unset")
        if self.batchnorm_trainable is None:
            object.__setattr__(self, "batchnorm_trainable", self.variant != "head-only")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def parse(cls, name: str, **kwargs) -> Scheme:
        return cls(name.strip(), **kwargs)


@dataclass
class Graph:
    input_shape: tuple[int, int, int]
    nodes: list[Node]
    output: str
    stages: list[dict] = field(default_factory=list)
    scheme: dict | None = None
    name: str = ""
    input_norm: dict | None = None

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def copy(self) -> Graph:
        return copy.deepcopy(self)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        for n in self.nodes:
            out.setdefault(n.id, [])
            for src in n.inputs:
                out.setdefault(src, []).append(n.id)
        return out

    def edges(self) -> list[tuple[str, str, int, tuple[int, ...]]]:
        shapes = infer_shapes(self)
        return [(src, n.id, port, shapes[src]) for n in self.nodes for port, src in enumerate(n.inputs)]

    def iter_params(self):
        for n in self.nodes:
            for name, arr in n.params.items():
                yield n, name, arr

    def head(self) -> Node:
        heads = [n for n in self.nodes if n.is_fc_head]
        if len(heads) != 1:
            raise GraphError(f"graph must have exactly one FC head, found {len(heads)}")
        return heads[0]

    def validate(self) -> None:
        seen = {INPUT}
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise GraphError(f"node {n.id!r}: unknown kind {n.kind!r}")
            if n.id in seen:
                raise GraphError(f"node {n.id!r}: duplicate id")
            for src in n.inputs:
                if src not in seen:
                    raise GraphError(f"node {n.id!r}: input {src!r} is not defined earlier (cycle or dangling edge)")
            for name, shape in n.param_shapes().items():
                if name not in n.params:
                    raise GraphError(f"node {n.id!r}: missing parameter {name!r}")
                if tuple(n.params[name].shape) != tuple(shape):
                    raise GraphError(f"node {n.id!r}: parameter {name!r} has shape "
                                     f"{tuple(n.params[name].shape)}, expected {tuple(shape)}")
            extra = set(n.params) - set(n.param_shapes())
            if extra:
                raise GraphError(f"node {n.id!r}: unexpected parameters {sorted(extra)}")
            for name, shape in n.buffer_shapes().items():
                if name not in n.buffers or tuple(n.buffers[name].shape) != tuple(shape):
                    raise GraphError(f"node {n.id!r}: missing or misshapen buffer {name!r}")
            if n.is_fc_head and n.kind != "dense":
                raise GraphError(f"node {n.id!r}: only a dense node can be the FC head")
            seen.add(n.id)
        if self.output not in seen:
            raise GraphError(f"output {self.output!r} is not a node")
        heads = [n.id for n in self.nodes if n.is_fc_head]
        if len(heads) > 1:
            raise GraphError(f"graph has several FC heads: {heads}")
        if heads and heads[0] != self.output:
            raise GraphError(f"FC head {heads[0]!r} is not the graph output")
        infer_shapes(self)


# --------------------------------------------------------------------------
# shape propagation


def _node_out_shape(n: Node, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    h = n.hyper
    need = {"add": 2, "mul": 2}.get(n.kind, 1)
    if len(ins) != need:
        raise GraphError(f"node {n.id!r}: {n.kind} takes {need} inputs, got {len(ins)}")
    x = ins[0]
    if n.kind in ("conv", "batchnorm", "pool", "adapter-block", "attention-block") and len(x) != 3:
        raise GraphError(f"node {n.id!r}: expects a C x H x W input, got {x}")
    if n.kind == "conv":
        c, hh, ww = x
        if c != h["in_ch"]:
            raise GraphError(f"node {n.id!r}: conv expects {h['in_ch']} channels, got {c}")
        k, s, p = h["k"], h.get("stride", 1), h.get("padding", 0)
        if hh + 2 * p < k or ww + 2 * p < k:
            raise GraphError(f"node {n.id!r}: kernel {k} exceeds padded input {x}")
        return (h["out_ch"], (hh + 2 * p - k) // s + 1, (ww + 2 * p - k) // s + 1)
    if n.kind == "batchnorm":
        if x[0] != h["channels"]:
            raise GraphError(f"node {n.id!r}: batchnorm expects {h['channels']} channels, got {x[0]}")
        return x
    if n.kind in ("relu", "sigmoid"):
        return x
    if n.kind == "pool":
        if h.get("axes", "spatial") == "channel":
            return (1, x[1], x[2])
        return (x[0], 1, 1)
    if n.kind == "dense":
        d = int(np.prod(x))
        if d != h["in_features"]:
            raise GraphError(f"node {n.id!r}: dense expects {h['in_features']} features, got {d}")
        return (h["out_features"],)
    if n.kind in ("add", "mul"):
        try:
            return tuple(np.broadcast_shapes(ins[0], ins[1]))
        except ValueError:
            raise GraphError(f"node {n.id!r}: {n.kind} inputs {ins[0]} and {ins[1]} do not broadcast") from None
    if n.kind == "adapter-block":
        if x[0] != h["channels"]:
            raise GraphError(f"node {n.id!r}: adapter expects {h['channels']} channels, got {x[0]}")
        s = h.get("stride", 1)
        return (h["out_channels"], (x[1] - 1) // s + 1, (x[2] - 1) // s + 1)
    if n.kind == "attention-block":
        if x[0] != h["channels"]:
            raise GraphError(f"node {n.id!r}: attention block expects {h['channels']} channels, got {x[0]}")
        return x
    raise GraphError(f"node {n.id!r}: unknown kind {n.kind!r}")


def infer_shapes(g: Graph, input_shape=None) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every node (batch dimension omitted)."""
    shapes: dict[str, tuple[int, ...]] = {INPUT: tuple(input_shape or g.input_shape)}
    for n in g.nodes:
        try:
            ins = [shapes[i] for i in n.inputs]
        except KeyError as e:
            raise GraphError(f"node {n.id!r}: input {e.args[0]!r} not available") from None
        shapes[n.id] = _node_out_shape(n, ins)
    return shapes


# --------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.nodes: list[Node] = []

    def _add(self, node: Node) -> str:
        self.nodes.append(node)
        return node.id

    def conv(self, nid, src, cin, cout, k, stride=1, padding=None, groups=1, bias=False, role="core"):
        padding = k // 2 if padding is None else padding
        fan_in = cin // groups * k * k
        w = (self.rng.standard_normal((cout, cin // groups, k, k)) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
        params = {"weight": w}
        if bias:
            params["bias"] = np.zeros(cout, dtype=self.dtype)
        hyper = dict(in_ch=cin, out_ch=cout, k=k, stride=stride, padding=padding, groups=groups, bias=bias, role=role)
        return self._add(Node(nid, "conv", [src], hyper, params))

    def bn(self, nid, src, c):
        return self._add(Node(nid, "batchnorm", [src], dict(channels=c, momentum=0.1, eps=1e-5),
                              {"gamma": np.ones(c, self.dtype), "beta": np.zeros(c, self.dtype)},
                              {"running_mean": np.zeros(c, self.dtype), "running_var": np.ones(c, self.dtype)}))

    def op(self, nid, kind, *srcs, **hyper):
        return self._add(Node(nid, kind, list(srcs), dict(hyper)))

    def dense(self, nid, src, din, dout):
        w = (self.rng.standard_normal((din, dout)) * np.sqrt(1.0 / din)).astype(self.dtype)
        return self._add(Node(nid, "dense", [src], dict(in_features=din, out_features=dout, bias=True),
                              {"weight": w, "bias": np.zeros(dout, self.dtype)}, is_fc_head=True))

    def head(self, src, channels, num_classes):
        p = self.op("pool", "pool", src, axes="spatial", mode="avg")
        return self.dense("fc", p, channels, num_classes)

    def node_ids_since(self, start: int) -> list[str]:
        return [n.id for n in self.nodes[start:]]


def _residual_unit(b: _Builder, prefix: str, src: str, cin: int, cout: int, stride: int) -> str:
    c1 = b.conv(f"{prefix}.conv1", src, cin, cout, 3, stride)
    r1 = b.op(f"{prefix}.relu1", "relu", b.bn(f"{prefix}.bn1", c1, cout))
    b2 = b.bn(f"{prefix}.bn2", b.conv(f"{prefix}.conv2", r1, cout, cout, 3, 1), cout)
    shortcut = src
    if stride != 1 or cin != cout:
        proj = b.conv(f"{prefix}.proj", src, cin, cout, 1, stride, padding=0, role="shortcut")
        shortcut = b.bn(f"{prefix}.proj_bn", proj, cout)
    return b.op(f"{prefix}.relu2", "relu", b.op(f"{prefix}.add", "add", b2, shortcut))


def _resnet(name, widths, units, num_classes, input_shape, stem_stride, seed, dtype) -> Graph:
    if not widths:
        raise ValueError("widths must be non-empty")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    b = _Builder(seed, dtype)
    x = b.conv("stem.conv", INPUT, input_shape[0], widths[0], 3, stem_stride, role="stem")
    x = b.op("stem.relu", "relu", b.bn("stem.bn", x, widths[0]))
    stages = []
    cin = widths[0]
    attach = x
    for si, w in enumerate(widths):
        start = len(b.nodes)
        for u in range(units):
            stride = 2 if (si > 0 and u == 0) else 1
            x = _residual_unit(b, f"s{si + 1}.u{u + 1}", x, cin, w, stride)
            cin = w
            if u == 0 and si > 0:
                # per-stage modules see the stage's own width: after the transition unit
                attach = x
        stages.append({"name": f"stage{si + 1}", "nodes": b.node_ids_since(start), "attach": attach})
    out = b.head(x, cin, num_classes)
    g = Graph(tuple(input_shape), b.nodes, out, stages, name=name)
    g.validate()
    return g


def build_resnet26(num_classes: int = 10, input_shape=(3, 72, 72), seed: int = 0, dtype=np.float32) -> Graph:
    """Three stages of four basic residual units, widths 64/128/256."""
    return _resnet("resnet26", (64, 128, 256), 4, num_classes, input_shape, 2, seed, dtype)


def build_micro(widths=(16, 32, 64), units_per_stage: int = 1, num_classes: int = 4, input_shape=(3, 32, 32),
                seed: int = 0, dtype=np.float32) -> Graph:
    return _resnet("micro", tuple(widths), units_per_stage, num_classes, input_shape, 2, seed, dtype)


MOBILE_STAGES = ((16, 3, 1), (24, 3, 2), (40, 5, 2), (80, 5, 2))


def build_mobile_mini(num_classes: int = 10, input_shape=(3, 72, 72), seed: int = 0, dtype=np.float32,
                      units_per_stage: int = 2) -> Graph:
    """Four stages of depthwise-separable units with kernel sizes 3, 3, 5, 5."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    b = _Builder(seed, dtype)
    stem_w = 16
    x = b.conv("stem.conv", INPUT, input_shape[0], stem_w, 3, 2, role="stem")
    x = b.op("stem.relu", "relu", b.bn("stem.bn", x, stem_w))
    cin = stem_w
    stages = []
    for si, (w, k, s) in enumerate(MOBILE_STAGES):
        start = len(b.nodes)
        for u in range(units_per_stage):
            p = f"m{si + 1}.u{u + 1}"
            stride = s if u == 0 else 1
            d = b.conv(f"{p}.dw", x, cin, cin, k, stride, groups=cin, role="depthwise")
            d = b.op(f"{p}.relu1", "relu", b.bn(f"{p}.bn1", d, cin))
            y = b.bn(f"{p}.bn2", b.conv(f"{p}.pw", d, cin, w, 1, 1, padding=0, role="core"), w)
            if stride == 1 and cin == w:
                y = b.op(f"{p}.add", "add", y, x)
            x = b.op(f"{p}.relu2", "relu", y)
            cin = w
        stages.append({"name": f"stage{si + 1}", "nodes": b.node_ids_since(start), "attach": x})
    out = b.head(x, cin, num_classes)
    g = Graph(tuple(input_shape), b.nodes, out, stages, name="mobile-mini")
    g.validate()
    return g


BACKBONES = {"resnet26": build_resnet26, "micro": build_micro, "mobile-mini": build_mobile_mini}


def build_backbone(name: str, num_classes: int, input_shape=None, seed: int = 0, **kwargs) -> Graph:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; valid backbones: {', '.join(BACKBONES)}")
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    return BACKBONES[name](num_classes=num_classes, seed=seed, **kwargs)


# --------------------------------------------------------------------------
# schemes


def _rewire(g: Graph, old: str, new: str, skip: set[str]) -> None:
    for n in g.nodes:
        if n.id in skip:
            continue
        n.inputs = [new if i == old else i for i in n.inputs]
    if g.output == old:
        g.output = new


def _insert_after(g: Graph, anchor: str, new_nodes: list[Node]) -> None:
    pos = 0 if anchor == INPUT else [n.id for n in g.nodes].index(anchor) + 1
    g.nodes[pos:pos] = new_nodes


def _block_node(nid, kind, src, hyper, spec: BlockSpec, rng, dtype) -> Node:
    hyper = dict(hyper, inserted=True)
    return Node(nid, kind, [src], hyper, init_block(spec, rng, dtype), trainable=True)


def apply_scheme(g: Graph, scheme: Scheme | str, seed: int = 0) -> Graph:
    """Return a copy of ``g`` adapted to ``scheme``; existing weights are copied unchanged."""
    if isinstance(scheme, str):
        scheme = Scheme.parse(scheme)
    if any(n.inserted for n in g.nodes):
        raise GraphError("graph already carries inserted modules; apply schemes to a plain backbone")
    out = g.copy()
    rng = np.random.default_rng(seed)
    dtype = out.head().params["weight"].dtype
    variant = scheme.variant

    for n in out.nodes:
        n.trainable = False

    if variant in ADAPTER_VARIANTS:
        core = [n for n in out.nodes if n.kind == "conv" and n.hyper.get("role") == "core"]
        for c in core:
            h = c.hyper
            if variant == "parallel-adapters":
                hyper = dict(sub="parallel", channels=h["in_ch"], out_channels=h["out_ch"],
                             stride=h.get("stride", 1), bias=scheme.adapter_bias)
                ad = _block_node(f"{c.id}.adapter", "adapter-block", c.inputs[0], hyper,
                                 Node("", "adapter-block", [], hyper).block_spec(), rng, dtype)
                s = Node(f"{c.id}.adapter_add", "add", [c.id, ad.id], {"inserted": True})
                _rewire(out, c.id, s.id, {s.id})
                _insert_after(out, c.id, [ad, s])
            else:
                hyper = dict(sub="serial", channels=h["out_ch"], out_channels=h["out_ch"], stride=1,
                             bias=scheme.adapter_bias)
                ad = _block_node(f"{c.id}.adapter", "adapter-block", c.id, hyper,
                                 Node("", "adapter-block", [], hyper).block_spec(), rng, dtype)
                _rewire(out, c.id, ad.id, {ad.id})
                _insert_after(out, c.id, [ad])
    elif variant in ATTENTION_VARIANTS:
        if not out.stages:
            raise GraphError(f"{variant} needs stage annotations, graph {out.name!r} has none")
        shapes = infer_shapes(out)
        sub = "cbam" if variant == "cbam" else variant.split("-")[0]
        for st in out.stages:
            attach = st["attach"]
            c = shapes[attach][0]
            hyper = dict(sub=sub, channels=c, k=scheme.k, r=scheme.r)
            blk = _block_node(f"{st['name']}.{variant}", "attention-block", attach, hyper,
                              Node("", "attention-block", [], hyper).block_spec(), rng, dtype)
            _rewire(out, attach, blk.id, {blk.id})
            _insert_after(out, attach, [blk])
            st["module"] = blk.id

    if variant == "finetune":
        for n in out.nodes:
            n.trainable = n.kind in PARAM_KINDS
    elif variant == "final-conv":
        convs = [n for n in out.nodes if n.kind == "conv"]
        convs[-1].trainable = True
    for n in out.nodes:
        if n.kind == "batchnorm" and scheme.batchnorm_trainable:
            n.trainable = True
        if n.inserted and n.params:
            n.trainable = True
        if n.is_fc_head:
            n.trainable = True
    out.scheme = scheme.to_dict()
    out.validate()
    return out


def replace_head(g: Graph, num_classes: int, seed: int = 0, init: str = "zeros") -> Graph:
    """Swap in a fresh FC head for a new task."""
    out = g.copy()
    head = out.head()
    din = head.hyper["in_features"]
    head.hyper["out_features"] = num_classes
    if init == "zeros":
        w = np.zeros((din, num_classes), dtype=head.params["weight"].dtype)
    else:
        rng = np.random.default_rng(seed)
        w = (rng.standard_normal((din, num_classes)) * np.sqrt(1.0 / din)).astype(head.params["weight"].dtype)
    head.params = {"weight": w, "bias": np.zeros(num_classes, dtype=w.dtype)}
    out.validate()
    return out


def parameter_partition(g: Graph) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """(trainable, frozen) parameter arrays keyed ``node/param``."""
    trainable, frozen = {}, {}
    for n, name, arr in g.iter_params():
        (trainable if n.trainable else frozen)[f"{n.id}/{name}"] = arr
    return trainable, frozen


# --------------------------------------------------------------------------
# execution


def param_tensors(g: Graph, requires_grad: bool | None = None) -> dict[str, dict[str, T.Tensor]]:
    """Wrap node parameters (shared memory) as tensors; trainable ones require grad."""
    out = {}
    for n in g.nodes:
        if n.params:
            rg = n.trainable if requires_grad is None else requires_grad
            out[n.id] = {k: T.Tensor(v, requires_grad=rg) for k, v in n.params.items()}
    return out


def _run_node(n: Node, xs: list[T.Tensor], p: dict[str, T.Tensor], mode: str) -> T.Tensor:
    h = n.hyper
    if n.kind == "conv":
        return T.conv2d(xs[0], p["weight"], p.get("bias"), h.get("stride", 1), h.get("padding", 0),
                        h.get("groups", 1))
    if n.kind == "batchnorm":
        bn_mode = "train" if (mode == "train" and n.trainable) else "eval"
        return T.batchnorm(xs[0], p["gamma"], p["beta"], n.buffers["running_mean"], n.buffers["running_var"],
                           bn_mode, h.get("momentum", 0.1), h.get("eps", 1e-5))
    if n.kind in ("relu", "sigmoid"):
        return T.activation(xs[0], n.kind)
    if n.kind == "pool":
        return T.pool(xs[0], h.get("axes", "spatial"), h.get("mode", "avg"))
    if n.kind == "dense":
        x = xs[0] if xs[0].data.ndim == 2 else T.flatten(xs[0])
        return T.dense(x, p["weight"], p.get("bias"))
    if n.kind == "add":
        return T.add(xs[0], xs[1])
    if n.kind == "mul":
        return T.mul(xs[0], xs[1])
    return apply_block(n.block_spec(), xs[0], p)


def forward(g: Graph, batch, mode: str = "eval", tensors: dict | None = None, trace: bool = False):
    """Execute the graph in node order.

    ``tensors`` supplies pre-wrapped parameters (as from ``param_tensors``);
    otherwise parameters are wrapped without gradients. In train mode only
    trainable batchnorm nodes use batch statistics and update their buffers.
    With ``trace`` the dict of every node output is returned as well.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if tuple(x.shape[1:]) != tuple(g.input_shape):
        raise GraphError(f"input batch shape {x.shape[1:]} does not match graph input {g.input_shape}")
    if tensors is None:
        tensors = param_tensors(g, requires_grad=False)
    values = {INPUT: x}
    for n in g.nodes:
        xs = [values[i] for i in n.inputs]
        try:
            values[n.id] = _run_node(n, xs, tensors.get(n.id, {}), mode)
        except (ValueError, FloatingPointError) as e:
            raise type(e)(f"node {n.id!r}: {e}") from e
    if trace:
        return values[g.output], values
    return values[g.output]


# --------------------------------------------------------------------------
# serialization


def graph_to_dict(g: Graph) -> dict:
    shapes = infer_shapes(g)
    return {
        "format": "mdlkit-graph/1",
        "name": g.name,
        "input": list(g.input_shape),
        "output": g.output,
        "nodes": [{"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "hyper": n.hyper,
                   "trainable": n.trainable, "is_fc_head": n.is_fc_head} for n in g.nodes],
        "edges": [{"src": src, "dst": n.id, "port": port, "shape": list(shapes[src])}
                  for n in g.nodes for port, src in enumerate(n.inputs)],
        "stages": g.stages,
        "scheme": g.scheme,
        "input_norm": g.input_norm,
    }


def graph_arrays(g: Graph) -> dict[str, np.ndarray]:
    arrays = {}
    for n in g.nodes:
        for k, v in n.params.items():
            arrays[f"{n.id}/param:{k}"] = v
        for k, v in n.buffers.items():
            arrays[f"{n.id}/buffer:{k}"] = v
    return arrays


def serialize(g: Graph) -> tuple[str, dict[str, np.ndarray]]:
    return json.dumps(graph_to_dict(g), indent=2, sort_keys=True) + "\n", graph_arrays(g)


def deserialize(text: str, arrays: dict[str, np.ndarray]) -> Graph:
    doc = json.loads(text)
    for key in ("input", "nodes", "output"):
        if key not in doc:
            raise GraphError(f"graph document missing field {key!r}")
    nodes = []
    for i, entry in enumerate(doc["nodes"]):
        for key in ("id", "kind", "inputs"):
            if key not in entry:
                raise GraphError(f"nodes[{i}]: missing field {key!r}")
        n = Node(entry["id"], entry["kind"], list(entry["inputs"]), dict(entry.get("hyper", {})),
                 trainable=bool(entry.get("trainable", False)), is_fc_head=bool(entry.get("is_fc_head", False)))
        if n.kind not in NODE_KINDS:
            raise GraphError(f"node {n.id!r}: field 'kind' has unknown value {n.kind!r}")
        for name in n.param_shapes():
            key = f"{n.id}/param:{name}"
            if key not in arrays:
                raise GraphError(f"node {n.id!r}: parameter {name!r} missing from weight container")
            n.params[name] = np.array(arrays[key])
        for name in n.buffer_shapes():
            key = f"{n.id}/buffer:{name}"
            if key not in arrays:
                raise GraphError(f"node {n.id!r}: buffer {name!r} missing from weight container")
            n.buffers[name] = np.array(arrays[key])
        nodes.append(n)
    g = Graph(tuple(doc["input"]), nodes, doc["output"], doc.get("stages", []), doc.get("scheme"),
              doc.get("name", ""), doc.get("input_norm"))
    g.validate()
    shapes = infer_shapes(g)
    for e in doc.get("edges", []):
        if tuple(e["shape"]) != shapes.get(e["src"]):
            raise GraphError(f"node {e['dst']!r}: edge from {e['src']!r} records shape {e['shape']}, "
                             f"graph implies {list(shapes.get(e['src'], ()))}")
    return g


def save_graph(g: Graph, json_path, weights_path) -> None:
    text, arrays = serialize(g)
    Path(json_path).write_text(text, encoding="utf-8")
    save_container(weights_path, arrays)


def load_graph(json_path, weights_path) -> Graph:
    arrays, _ = load_container(weights_path)
    return deserialize(Path(json_path).read_text(encoding="utf-8"), arrays)
