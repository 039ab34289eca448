"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from mdlkit.blocks import BLOCK_KINDS
from mdlkit.graph import INPUT, Graph, Node, _Builder


def conv_loop(x, w, b=None, stride=1, pad=0, groups=1):
    """Direct nested-loop cross-correlation; also returns the multiply count."""
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    opg = cout // groups
    mults = 0
    for i in range(n):
        for o in range(cout):
            g = o // opg
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cpg):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[i, g * cpg + c, y * stride + u, z * stride + v] * w[o, c, u, v]
                                mults += 1
                    out[i, o, y, z] = acc
    return out, mults


def dense_loop(x, w, b=None):
    n, d = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    mults = 0
    for i in range(n):
        for j in range(m):
            acc = 0.0 if b is None else float(b[j])
            for t in range(d):
                acc += x[i, t] * w[t, j]
                mults += 1
            out[i, j] = acc
    return out, mults


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


# --------------------------------------------------------------------------
# block oracles built from the loop primitives; each returns (output, multiplies)


def channel_attention_loop(F, w1, w2):
    n, c, h, w = F.shape
    out = np.zeros_like(F, dtype=np.float64)
    maps = np.zeros((n, c))
    mults = 0
    for i in range(n):
        avg = np.array([F[i, j].sum() / (h * w) for j in range(c)])
        mx = np.array([F[i, j].max() for j in range(c)])
        logits = np.zeros(c)
        for v in (avg, mx):
            hid, m1 = dense_loop(v[None], w1)
            hid = np.maximum(hid, 0)
            o, m2 = dense_loop(hid, w2)
            logits += o[0]
            mults += m1 + m2
        maps[i] = sigmoid(logits)
        for j in range(c):
            out[i, j] = F[i, j] * maps[i, j]
    return out, maps, mults // n


def spatial_attention_loop(F, f, bias):
    n, c, h, w = F.shape
    k = f.shape[-1]
    pooled = np.zeros((n, 2, h, w))
    for i in range(n):
        for y in range(h):
            for z in range(w):
                col = [F[i, j, y, z] for j in range(c)]
                pooled[i, 0, y, z] = sum(col) / c
                pooled[i, 1, y, z] = max(col)
    conv, mults = conv_loop(pooled, f, bias, 1, k // 2)
    m = sigmoid(conv)
    return F * m, m, mults // n


def adaptive_attention_loop(F, alpha, ab, K, kb):
    n = F.shape[0]
    k = K.shape[-1]
    red, m1 = conv_loop(F, alpha, ab)
    att, m2 = conv_loop(np.maximum(red, 0), K, kb, 1, k // 2)
    a = sigmoid(att)
    return F * a, a, (m1 + m2) // n


# --------------------------------------------------------------------------
# random small graphs for the counting oracles


def random_micro_graph(seed: int, max_nodes: int = 10) -> Graph:
    """A random graph of at most ``max_nodes`` nodes with random trainable flags.

    Mixes convs (varied k/stride/groups/bias), batchnorm, relu, residual adds,
    attention and adapter blocks, and ends in pool + dense head.
    """
    rng = np.random.default_rng(seed)
    b = _Builder(seed, np.float64)
    c0 = int(rng.integers(1, 4))
    hw = int(rng.integers(4, 9))
    shapes = {INPUT: (c0, hw, hw)}
    cur = INPUT
    budget = max_nodes - 2
    i = 0
    while len(b.nodes) < budget:
        c, h, w = shapes[cur]
        choice = rng.choice(["conv", "bn", "relu", "add", "attn", "adapter"])
        nid = f"n{i}"
        i += 1
        if choice == "conv" or (cur == INPUT and choice in ("bn", "add")):
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 1, 2])) if h > 2 else 1
            groups = int(rng.choice([g for g in (1, 2) if c % g == 0]))
            cout = groups * int(rng.integers(1, 4))
            b.conv(nid, cur, c, cout, k, stride, groups=groups, bias=bool(rng.integers(0, 2)))
            shapes[nid] = (cout, (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1)
        elif choice == "bn":
            b.bn(nid, cur, c)
            shapes[nid] = (c, h, w)
        elif choice == "relu":
            b.op(nid, "relu", cur)
            shapes[nid] = (c, h, w)
        elif choice == "add":
            same = [s for s, sh in shapes.items() if sh == (c, h, w) and s != cur]
            if not same:
                continue
            b.op(nid, "add", cur, same[int(rng.integers(0, len(same)))])
            shapes[nid] = (c, h, w)
        else:
            nodes = _random_block(nid, cur, (c, h, w), choice, rng)
            if nodes is None:
                continue
            b._add(nodes[0])
            shapes[nid] = nodes[1]
        cur = b.nodes[-1].id
    p = b.op("pool", "pool", cur, axes="spatial", mode="avg")
    b.dense("fc", p, shapes[cur][0], int(rng.integers(2, 5)))
    for n in b.nodes:
        n.trainable = bool(rng.integers(0, 2)) if n.params else False
    b.nodes[-1].trainable = True
    g = Graph(shapes[INPUT], b.nodes, "fc", name=f"random{seed}")
    g.validate()
    return g


def _random_block(nid, src, shape, choice, rng):
    from mdlkit.blocks import BlockSpec, init_block

    c, h, w = shape
    if choice == "adapter":
        co = int(rng.integers(1, 5))
        hyper = dict(sub="parallel", channels=c, out_channels=co, stride=1, bias=bool(rng.integers(0, 2)))
        spec = BlockSpec("parallel-adapter", c, out_channels=co, bias=hyper["bias"])
        return Node(nid, "adapter-block", [src], hyper, init_block(spec, rng, np.float64)), (co, h, w)
    sub = str(rng.choice(["channel", "spatial", "adaptive", "cbam"]))
    r = 1 if sub in ("channel", "cbam") else 16
    k = int(rng.choice([3, 5]))
    kind = "cbam" if sub == "cbam" else f"{sub}-attention"
    assert kind in BLOCK_KINDS
    spec = BlockSpec(kind, c, k=k, r=r)
    hyper = dict(sub=sub, channels=c, k=k, r=r)
    return Node(nid, "attention-block", [src], hyper, init_block(spec, rng, np.float64)), shape


def brute_param_counts(g: Graph):
    """Walk every scalar of every stored parameter array."""
    total = trainable = total_wo = trainable_wo = 0
    for n in g.nodes:
        for arr in n.params.values():
            cnt = sum(1 for _ in itertools.product(*[range(s) for s in arr.shape])) if arr.ndim else 1
            total += cnt
            trainable += cnt if n.trainable else 0
            if not n.is_fc_head:
                total_wo += cnt
                trainable_wo += cnt if n.trainable else 0
    return total, trainable, total_wo, trainable_wo


def brute_macs(g: Graph) -> int:
    """Run one sample through loop oracles and count every multiply they perform."""
    rng = np.random.default_rng(0)
    vals = {INPUT: rng.standard_normal((1, *g.input_shape))}
    mults = 0
    for n in g.nodes:
        x = vals[n.inputs[0]]
        h = n.hyper
        if n.kind == "conv":
            y, m = conv_loop(x, n.params["weight"], n.params.get("bias"), h["stride"], h["padding"], h["groups"])
        elif n.kind == "dense":
            y, m = dense_loop(x.reshape(1, -1), n.params["weight"], n.params.get("bias"))
        elif n.kind == "adapter-block":
            y, m = conv_loop(x, n.params["alpha"], n.params.get("bias"), h.get("stride", 1))
        elif n.kind == "attention-block":
            p = n.params
            if h["sub"] == "channel":
                y, _, m = channel_attention_loop(x, p["w1"], p["w2"])
            elif h["sub"] == "spatial":
                y, _, m = spatial_attention_loop(x, p["f"], p["f_bias"])
            elif h["sub"] == "adaptive":
                y, _, m = adaptive_attention_loop(x, p["alpha"], p["alpha_bias"], p["K"], p["K_bias"])
            else:
                y1, _, m1 = channel_attention_loop(x, p["w1"], p["w2"])
                y, _, m2 = spatial_attention_loop(y1, p["f"], p["f_bias"])
                m = m1 + m2
        elif n.kind == "add":
            y, m = x + vals[n.inputs[1]], 0
        elif n.kind == "relu":
            y, m = np.maximum(x, 0), 0
        elif n.kind == "pool":
            y, m = x.mean(axis=(2, 3), keepdims=True), 0
        else:  # batchnorm: identity is enough for shape and multiply counting
            y, m = x, 0
        vals[n.id] = y
        mults += m
    return mults


def brute_connections(g: Graph) -> int:
    """Resolve each tensor's side recursively, then sum sizes of tensors read across the boundary."""
    by_id = {n.id: n for n in g.nodes}
    memo = {INPUT: False}

    def side(nid):
        if nid not in memo:
            n = by_id[nid]
            if n.kind in ("conv", "dense", "adapter-block", "attention-block"):
                memo[nid] = n.trainable
            else:
                memo[nid] = side(n.inputs[0])
        return memo[nid]

    sizes = {INPUT: int(np.prod(g.input_shape))}
    rng = np.random.default_rng(1)
    from mdlkit.graph import forward

    _, trace = forward(g, rng.standard_normal((1, *g.input_shape)), "eval", trace=True)
    for k, v in trace.items():
        sizes[k] = v.data.size
    crossing = set()
    for n in g.nodes:
        for src in n.inputs:
            if side(src) != side(n.id):
                crossing.add(src)
    return sum(sizes[s] for s in crossing)
