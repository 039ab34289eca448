"""Finite-difference sweep over every differentiable op and block.

Each case draws a random shape (at most 2 x 4 x 8 x 8 for feature maps), builds
a scalar objective by contracting the op's output with a fixed random tensor,
and compares tape gradients with central differences in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blocks as B
from . import tensor as T


@dataclass
class CaseResult:
    name: str
    shape: tuple[int, ...]
    error: float


@dataclass
class SuiteReport:
    seed: int
    tolerance: float
    results: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def per_op(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.error)
        return out

    def failures(self) -> list[CaseResult]:
        return [r for r in self.results if r.error >= self.tolerance]


def _probe(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    return T.tsum(T.mul(out, T.Tensor(weights)))


def _feature_shape(rng, min_hw=1, max_c=4):
    return (int(rng.integers(1, 3)), int(rng.integers(1, max_c + 1)), int(rng.integers(min_hw, 9)),
            int(rng.integers(min_hw, 9)))


def _away_from_zero(x: np.ndarray, margin=0.05) -> np.ndarray:
    return np.where(x >= 0, x + margin, x - margin)


# Each builder returns (shape, fn, inputs). fn takes the inputs as tensors.

def _conv(rng):
    k = int(rng.choice([1, 3, 5]))
    groups = int(rng.choice([1, 2]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    n = int(rng.integers(1, 3))
    h = int(rng.integers(max(1, k - 2 * pad), 9))
    w = int(rng.integers(max(1, k - 2 * pad), 9))
    x = rng.standard_normal((n, cin, h, w))
    kern = rng.standard_normal((cout, cin // groups, k, k))
    bias = rng.standard_normal(cout)
    probe = rng.standard_normal((n, cout, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1))
    fn = lambda x, kk, b: _probe(T.conv2d(x, kk, b, stride, pad, groups), probe)  # noqa: E731
    return x.shape, fn, [x, kern, bias]


def _pool(axes, mode):
    def build(rng):
        x = rng.standard_normal(_feature_shape(rng))
        out_shape = (x.shape[0], 1, *x.shape[2:]) if axes == "channel" else (*x.shape[:2], 1, 1)
        probe = rng.standard_normal(out_shape)
        return x.shape, (lambda x: _probe(T.pool(x, axes, mode), probe)), [x]
    return build


def _eltwise(op):
    def build(rng):
        n, c, h, w = _feature_shape(rng)
        a = rng.standard_normal((n, c, h, w))
        b_shape = [(n, c, h, w), (1, 1, h, w), (n, 1, h, w), (1, c, 1, 1), (n, c, 1, 1)][int(rng.integers(0, 5))]
        b = rng.standard_normal(b_shape)
        probe = rng.standard_normal(a.shape)
        return a.shape, (lambda a, b: _probe(T.eltwise(a, b, op), probe)), [a, b]
    return build


def _scale(rng):
    x = rng.standard_normal(_feature_shape(rng))
    c = float(rng.uniform(-2, 2))
    probe = rng.standard_normal(x.shape)
    return x.shape, (lambda x: _probe(T.scale(x, c), probe)), [x]


def _dense(rng):
    n, d, m = (int(v) for v in rng.integers(1, 8, 3))
    x, wt, b = rng.standard_normal((n, d)), rng.standard_normal((d, m)), rng.standard_normal(m)
    probe = rng.standard_normal((n, m))
    return x.shape, (lambda x, wt, b: _probe(T.dense(x, wt, b), probe)), [x, wt, b]


def _activation(kind):
    def build(rng):
        x = rng.standard_normal(_feature_shape(rng)) * 2
        if kind == "relu":
            x = _away_from_zero(x)
        probe = rng.standard_normal(x.shape)
        return x.shape, (lambda x: _probe(T.activation(x, kind), probe)), [x]
    return build


def _batchnorm(mode):
    def build(rng):
        shape = _feature_shape(rng, min_hw=2)
        c = shape[1]
        x = rng.standard_normal(shape) * 1.5 + 0.3
        gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)
        rm, rv = rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2.0, c)
        probe = rng.standard_normal(shape)

        def fn(x, g, b):
            return _probe(T.batchnorm(x, g, b, rm.copy(), rv.copy(), mode), probe)
        return shape, fn, [x, gamma, beta]
    return build


def _concat(rng):
    n, c, h, w = _feature_shape(rng)
    a, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((n, int(rng.integers(1, 4)), h, w))
    probe = rng.standard_normal((n, c + b.shape[1], h, w))
    return a.shape, (lambda a, b: _probe(T.concat([a, b], axis=1), probe)), [a, b]


def _reshape(rng):
    x = rng.standard_normal(_feature_shape(rng))
    probe = rng.standard_normal((x.shape[0], x.size // x.shape[0]))
    return x.shape, (lambda x: _probe(T.flatten(x), probe)), [x]


def _reductions(rng):
    x = rng.standard_normal(_feature_shape(rng))
    return x.shape, (lambda x: T.tsum(T.mul(x, x)) + T.tmean(x)), [x]


def _parallel_adapter(rng):
    n, cin, h, w = _feature_shape(rng, min_hw=3)
    cout, stride = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    F = rng.standard_normal((n, cin, h, w))
    K = rng.standard_normal((cout, cin, 3, 3))
    alpha, bias = rng.standard_normal((cout, cin, 1, 1)), rng.standard_normal(cout)
    ho, wo = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
    probe = rng.standard_normal((n, cout, ho, wo))

    def fn(F, K, a, b):
        return _probe(B.parallel_adapter(F, K, B.ParallelAdapterParams(a, b), stride, 1), probe)
    return F.shape, fn, [F, K, alpha, bias]


def _serial_adapter(rng):
    F = rng.standard_normal(_feature_shape(rng))
    c = F.shape[1]
    alpha, bias = rng.standard_normal((c, c, 1, 1)), rng.standard_normal(c)
    probe = rng.standard_normal(F.shape)
    return F.shape, (lambda F, a, b: _probe(B.serial_adapter(F, B.ParallelAdapterParams(a, b)), probe)), \
        [F, alpha, bias]


def _channel_params(rng, c):
    r = int(rng.choice([d for d in (1, 2, 4) if c % d == 0]))
    return rng.standard_normal((c, c // r)), rng.standard_normal((c // r, c))


def _channel_attention(rng):
    F = rng.standard_normal(_feature_shape(rng))
    w1, w2 = _channel_params(rng, F.shape[1])
    probe = rng.standard_normal(F.shape)
    return F.shape, (lambda F, w1, w2: _probe(B.channel_attention(F, B.ChannelAttentionParams(w1, w2))[1], probe)), \
        [F, w1, w2]


def _spatial_attention(rng):
    F = rng.standard_normal(_feature_shape(rng))
    k = int(rng.choice([3, 5, 7]))
    f, b = rng.standard_normal((1, 2, k, k)) * 0.5, rng.standard_normal(1)
    probe = rng.standard_normal(F.shape)
    return F.shape, (lambda F, f, b: _probe(B.spatial_attention(F, B.SpatialAttentionParams(f, b))[1], probe)), \
        [F, f, b]


def _cbam(rng):
    F = rng.standard_normal(_feature_shape(rng))
    w1, w2 = _channel_params(rng, F.shape[1])
    k = int(rng.choice([3, 5]))
    f, b = rng.standard_normal((1, 2, k, k)) * 0.5, rng.standard_normal(1)
    probe = rng.standard_normal(F.shape)

    def fn(F, w1, w2, f, b):
        return _probe(B.cbam(F, B.ChannelAttentionParams(w1, w2), B.SpatialAttentionParams(f, b)), probe)
    return F.shape, fn, [F, w1, w2, f, b]


def _adaptive_attention(rng):
    F = rng.standard_normal(_feature_shape(rng))
    c = F.shape[1]
    k = int(rng.choice([3, 5, 7]))
    alpha, ab = rng.standard_normal((1, c, 1, 1)), rng.standard_normal(1)
    K, kb = rng.standard_normal((1, 1, k, k)) * 0.5, rng.standard_normal(1)
    probe = rng.standard_normal(F.shape)

    def fn(F, a, ab, K, kb):
        return _probe(B.adaptive_attention(F, B.AdaptiveAttentionParams(a, ab, K, kb)), probe)
    return F.shape, fn, [F, alpha, ab, K, kb]


CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "pool-channel-avg": _pool("channel", "avg"),
    "pool-channel-max": _pool("channel", "max"),
    "pool-spatial-avg": _pool("spatial", "avg"),
    "pool-spatial-max": _pool("spatial", "max"),
    "eltwise-add": _eltwise("add"),
    "eltwise-mul": _eltwise("mul"),
    "scale": _scale,
    "dense": _dense,
    "activation-relu": _activation("relu"),
    "activation-sigmoid": _activation("sigmoid"),
    "batchnorm-train": _batchnorm("train"),
    "batchnorm-eval": _batchnorm("eval"),
    "concat": _concat,
    "reshape": _reshape,
    "sum-mean": _reductions,
    "parallel-adapter": _parallel_adapter,
    "serial-adapter": _serial_adapter,
    "channel-attention": _channel_attention,
    "spatial-attention": _spatial_attention,
    "cbam": _cbam,
    "adaptive-attention": _adaptive_attention,
}


def run_suite(seed: int = 0, shapes_per_case: int = 5, tolerance: float = 1e-5, cases=None) -> SuiteReport:
    """Check every case on ``shapes_per_case`` random shapes."""
    rng = np.random.default_rng(seed)
    report = SuiteReport(seed, tolerance)
    start = time.perf_counter()
    for name in cases or CASES:
        build = CASES[name]
        for _ in range(shapes_per_case):
            shape, fn, arrays = build(rng)
            err = T.grad_check(fn, [T.Tensor(a, dtype=np.float64) for a in arrays], tolerance=tolerance)
            report.results.append(CaseResult(name, tuple(int(s) for s in shape), float(err)))
    report.seconds = time.perf_counter() - start
    return report
