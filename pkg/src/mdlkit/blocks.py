"""Adapter and attention blocks for frozen-backbone domain adaptation.

All blocks operate on N x C x H x W tensors. The attention variants return a
gated copy of their input whose shape matches the input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat, conv2d, dense, flatten, mul, pool, relu, reshape, sigmoid

BLOCK_KINDS = ("parallel-adapter", "serial-adapter", "channel-attention", "spatial-attention",
               "cbam", "adaptive-attention")


@dataclass
class ParallelAdapterParams:
    alpha: Tensor  # C_out x C_in x 1 x 1
    bias: Tensor | None = None


@dataclass
class SpatialAttentionParams:
    f: Tensor  # 1 x 2 x k x k
    bias: Tensor


@dataclass
class ChannelAttentionParams:
    w1: Tensor  # C x C/r
    w2: Tensor  # C/r x C


@dataclass
class AdaptiveAttentionParams:
    alpha: Tensor  # 1 x C x 1 x 1
    alpha_bias: Tensor
    K: Tensor  # 1 x 1 x k x k
    K_bias: Tensor


def parallel_adapter(F: Tensor, K: Tensor, alpha: ParallelAdapterParams, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Core convolution plus a 1x1 adapter branch on the same input."""
    core = conv2d(F, K, stride=stride, padding=padding)
    branch = adapter_branch(F, alpha, stride)
    if core.shape != branch.shape:
        raise ValueError(f"parallel adapter: core output {core.shape} and adapter output {branch.shape} differ")
    return core + branch


def adapter_branch(F: Tensor, alpha: ParallelAdapterParams, stride: int = 1) -> Tensor:
    if alpha.alpha.shape[2:] != (1, 1):
        raise ValueError(f"adapter kernel must be 1x1, got {alpha.alpha.shape}")
    if alpha.alpha.shape[1] != F.shape[1]:
        raise ValueError(f"adapter expects {alpha.alpha.shape[1]} channels, input has {F.shape[1]}")
    return conv2d(F, alpha.alpha, alpha.bias, stride=stride, padding=0)


def serial_adapter(G: Tensor, alpha: ParallelAdapterParams) -> Tensor:
    if alpha.alpha.shape[0] != alpha.alpha.shape[1]:
        raise ValueError(f"serial adapter must preserve channels, got kernel {alpha.alpha.shape}")
    return G + adapter_branch(G, alpha)


def _mlp(v: Tensor, p: ChannelAttentionParams) -> Tensor:
    return dense(relu(dense(v, p.w1)), p.w2)


def channel_attention(F: Tensor, p: ChannelAttentionParams) -> tuple[Tensor, Tensor]:
    """Return (channel map N x C x 1 x 1, reweighted features)."""
    n, c = F.shape[:2]
    if p.w1.shape[0] != c or p.w2.shape[1] != c:
        raise ValueError(f"channel attention weights {p.w1.shape}/{p.w2.shape} do not match {c} channels")
    avg = flatten(pool(F, "spatial", "avg"))
    mx = flatten(pool(F, "spatial", "max"))
    m_c = reshape(sigmoid(_mlp(avg, p) + _mlp(mx, p)), (n, c, 1, 1))
    return m_c, mul(F, m_c)


def spatial_attention(F: Tensor, p: SpatialAttentionParams) -> tuple[Tensor, Tensor]:
    """Return (spatial map N x 1 x H x W, gated features)."""
    k = p.f.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"spatial attention kernel size must be odd, got {k}")
    if p.f.shape[:2] != (1, 2):
        raise ValueError(f"spatial attention kernel must be 1x2xkxk, got {p.f.shape}")
    pooled = concat([pool(F, "channel", "avg"), pool(F, "channel", "max")], axis=1)
    m_s = sigmoid(conv2d(pooled, p.f, p.bias, padding=k // 2))
    return m_s, mul(F, m_s)


def cbam(F: Tensor, cp: ChannelAttentionParams, sp: SpatialAttentionParams) -> Tensor:
    _, f1 = channel_attention(F, cp)
    _, f2 = spatial_attention(f1, sp)
    return f2


def adaptive_attention_map(F: Tensor, p: AdaptiveAttentionParams) -> Tensor:
    if p.alpha.shape != (1, F.shape[1], 1, 1):
        raise ValueError(f"adaptive attention reducer {p.alpha.shape} does not match {F.shape[1]} channels")
    k = p.K.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"adaptive attention kernel size must be odd, got {k}")
    reduced = relu(conv2d(F, p.alpha, p.alpha_bias))
    return sigmoid(conv2d(reduced, p.K, p.K_bias, padding=k // 2))


def adaptive_attention(F: Tensor, p: AdaptiveAttentionParams) -> Tensor:
    """Gate F by sigmoid(K * relu(alpha * F)), a single-channel spatial map."""
    return mul(F, adaptive_attention_map(F, p))


# --------------------------------------------------------------------------
# block specs: parameter shapes, counts, initialization


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    out_channels: int | None = None
    k: int = 7
    r: int = 16
    bias: bool = False
    stride: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {', '.join(BLOCK_KINDS)}")
        if self.kind in ("channel-attention", "cbam") and self.channels % self.r:
            raise ValueError(f"reduction ratio {self.r} does not divide {self.channels} channels")
        if self.kind in ("spatial-attention", "cbam", "adaptive-attention") and self.k % 2 == 0:
            raise ValueError(f"attention kernel size must be odd, got {self.k}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, k = self.channels, self.k
        if self.kind in ("parallel-adapter", "serial-adapter"):
            co = self.out_channels or c
            shapes = {"alpha": (co, c, 1, 1)}
            if self.bias:
                shapes["bias"] = (co,)
            return shapes
        shapes = {}
        if self.kind in ("channel-attention", "cbam"):
            shapes["w1"] = (c, c // self.r)
            shapes["w2"] = (c // self.r, c)
        if self.kind in ("spatial-attention", "cbam"):
            shapes["f"] = (1, 2, k, k)
            shapes["f_bias"] = (1,)
        if self.kind == "adaptive-attention":
            shapes["alpha"] = (1, c, 1, 1)
            shapes["alpha_bias"] = (1,)
            shapes["K"] = (1, 1, k, k)
            shapes["K_bias"] = (1,)
        return shapes


def block_param_count(spec: BlockSpec) -> int:
    return sum(int(np.prod(s)) for s in spec.param_shapes().values())


def init_block(spec: BlockSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases."""
    out = {}
    for name, shape in spec.param_shapes().items():
        if len(shape) == 1:
            out[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return out


def apply_block(spec: BlockSpec, F: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Run a block from its spec and named parameters (graph execution path)."""
    kind = spec.kind
    if kind == "parallel-adapter":
        return adapter_branch(F, ParallelAdapterParams(params["alpha"], params.get("bias")), spec.stride)
    if kind == "serial-adapter":
        return serial_adapter(F, ParallelAdapterParams(params["alpha"], params.get("bias")))
    if kind == "channel-attention":
        return channel_attention(F, ChannelAttentionParams(params["w1"], params["w2"]))[1]
    if kind == "spatial-attention":
        return spatial_attention(F, SpatialAttentionParams(params["f"], params["f_bias"]))[1]
    if kind == "cbam":
        return cbam(F, ChannelAttentionParams(params["w1"], params["w2"]),
                    SpatialAttentionParams(params["f"], params["f_bias"]))
    return adaptive_attention(F, AdaptiveAttentionParams(params["alpha"], params["alpha_bias"],
                                                         params["K"], params["K_bias"]))


def block_macs(spec: BlockSpec, in_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulates of the block's convolutions and perceptron layers."""
    c, h, w = in_shape
    kind = spec.kind
    if kind in ("parallel-adapter", "serial-adapter"):
        co = spec.out_channels or c
        ho = (h - 1) // spec.stride + 1
        wo = (w - 1) // spec.stride + 1
        return co * ho * wo * c
    total = 0
    if kind in ("channel-attention", "cbam"):
        hidden = c // spec.r
        total += 2 * (c * hidden + hidden * c)
    if kind in ("spatial-attention", "cbam"):
        total += 2 * spec.k * spec.k * h * w
    if kind == "adaptive-attention":
        total += c * h * w + spec.k * spec.k * h * w
    return total
