"""Dense tensors with tape-based reverse-mode differentiation.

Feature maps use the N x C x H x W layout throughout. Every op returns a new
``Tensor``; when any input requires a gradient the output records its parents
and a backward closure, which together form the tape that ``backward`` walks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return eltwise(self, other, "add")

    __radd__ = __add__

    def __mul__(self, other):
        return eltwise(self, other, "mul")

    __rmul__ = __mul__

    def __sub__(self, other):
        return eltwise(self, scale(as_tensor(other, self.dtype), -1.0), "add")

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op's output and record it on the tape when needed."""
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = op
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Record an op defined outside this module.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    return _result(np.asarray(data), op, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# convolution


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Columns (C*k*k, N*Ho*Wo) of a zero-padded N x C x H x W array."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    view = _windows(np.ascontiguousarray(xp), k, stride, ho, wo)
    cols = np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def _conv_dense(x: np.ndarray, wk: np.ndarray, stride: int, padding: int):
    n = x.shape[0]
    c_out, _, k, _ = wk.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = (wk.reshape(c_out, -1) @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or groups < 1:
        raise ValueError("conv2d stride and groups must be positive")
    if padding < 0:
        raise ValueError("conv2d padding must be non-negative")
    n, c_in, h, w = x.shape
    c_out, c_per_group, k, k2 = kernel.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {kernel.shape}")
    if c_in % groups or c_out % groups:
        raise ValueError(f"conv2d channels {c_in}->{c_out} not divisible by groups={groups}")
    if c_per_group != c_in // groups:
        raise ValueError(f"conv2d kernel expects {c_per_group * groups} input channels, input has {c_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d kernel {k} larger than padded input {h}x{w}+{padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({c_out},)")

    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    wk = kernel.data
    if groups == 1:
        out, cols = _conv_dense(x.data, wk, stride, padding)
        if not kernel.requires_grad:
            cols = None
    else:
        cg, og = c_in // groups, c_out // groups
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        gcols = _windows(np.ascontiguousarray(xp), k, stride, ho, wo).reshape(n, groups, cg, k, k, ho, wo)
        gw = wk.reshape(groups, og, cg, k, k)
        out = np.einsum("gocij,ngcijhw->ngohw", gw, gcols, optimize=True).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        dx = dk = db = None
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if groups == 1:
            g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
            if kernel.requires_grad:
                dk = (g2 @ cols.T).reshape(wk.shape)
            if x.requires_grad:
                if stride == 1 and padding <= k - 1:
                    # full correlation of the output gradient with the flipped kernel
                    flipped = np.ascontiguousarray(wk[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                    dx, _ = _conv_dense(g, flipped, 1, k - 1 - padding)
                else:
                    dcols = (wk.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, n, ho, wo)
                    dx = _col2im(dcols.transpose(3, 0, 1, 2, 4, 5), x.shape, k, stride, padding)
            return dx, dk, db
        gg = g.reshape(n, groups, c_out // groups, ho, wo)
        if kernel.requires_grad:
            dk = np.einsum("ngohw,ngcijhw->gocij", gg, gcols, optimize=True).reshape(wk.shape)
        if x.requires_grad:
            dcols = np.einsum("gocij,ngohw->ngcijhw", gw, gg, optimize=True).reshape(n, c_in, k, k, ho, wo)
            dx = _col2im(dcols, x.shape, k, stride, padding)
        return dx, dk, db

    parents = [x, kernel] + ([bias] if bias is not None else [])

    def route(g):
        dx, dk, db = backward_fn(g)
        return (dx, dk, db) if bias is not None else (dx, dk)

    return _result(out, "conv2d", parents, route)


def _col2im(dcols: np.ndarray, shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add (N, C, k, k, Ho, Wo) window gradients back onto the input."""
    n, c, h, w = shape
    ho, wo = dcols.shape[-2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp


# --------------------------------------------------------------------------
# pooling


def pool(x: Tensor, axes: str = "spatial", mode: str = "avg") -> Tensor:
    """Channel pooling (N,1,H,W) or global spatial pooling (N,C,1,1)."""
    if x.data.ndim != 4:
        raise ValueError(f"pool expects a 4-D tensor, got {x.shape}")
    if x.size == 0:
        raise ValueError("pool over an empty tensor")
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pool mode {mode!r}")
    n, c, h, w = x.shape
    if axes == "channel":
        flat = x.data
        red_axis, red_len = 1, c
    elif axes in ("spatial", "spatial-global"):
        flat = x.data.reshape(n, c, h * w)
        red_axis, red_len = 2, h * w
    else:
        raise ValueError(f"unknown pool axes {axes!r}")

    if mode == "avg":
        out = flat.mean(axis=red_axis, keepdims=True)
    else:
        idx = np.argmax(flat, axis=red_axis)
        out = np.take_along_axis(flat, np.expand_dims(idx, red_axis), axis=red_axis)
    out_shape = (n, 1, h, w) if axes == "channel" else (n, c, 1, 1)
    out = out.reshape(out_shape)

    def backward_fn(g):
        if mode == "avg":
            if axes == "channel":
                return (np.broadcast_to(g / red_len, x.shape).copy(),)
            return (np.broadcast_to(g / red_len, x.shape).copy(),)
        dx = np.zeros(flat.shape, dtype=x.dtype)
        gr = g.reshape(out.shape if axes == "channel" else (n, c, 1))
        np.put_along_axis(dx, np.expand_dims(idx, red_axis), gr, axis=red_axis)
        return (dx.reshape(x.shape),)

    return _result(out, f"pool-{axes}-{mode}", [x], backward_fn)


# --------------------------------------------------------------------------
# elementwise


def eltwise(a: Tensor, b, op: str) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"eltwise {op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if op == "add":
        out = a.data + b.data
    elif op == "mul":
        out = a.data * b.data
    else:
        raise ValueError(f"unknown eltwise op {op!r}")
    out = np.broadcast_to(out, shape)

    def backward_fn(g):
        if op == "add":
            ga, gb = g, g
        else:
            ga = g * b.data if a.requires_grad else None
            gb = g * a.data if b.requires_grad else None
        return (_unbroadcast(ga, a.shape) if ga is not None and a.requires_grad else None,
                _unbroadcast(gb, b.shape) if gb is not None and b.requires_grad else None)

    return _result(np.array(out), f"eltwise-{op}", [a, b], backward_fn)


def add(a: Tensor, b) -> Tensor:
    return eltwise(a, b, "add")


def mul(a: Tensor, b) -> Tensor:
    return eltwise(a, b, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)
    return _result(out, "scale", [x], lambda g: (g * c,))


# --------------------------------------------------------------------------
# dense, activations, normalization


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ValueError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense: input width {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dx = g @ weights.data.T if x.requires_grad else None
        dw = x.data.T @ g if weights.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = [x, weights] + ([bias] if bias is not None else [])
    return _result(out, "dense", parents, backward_fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    half = v.dtype.type(0.5)
    return half * (np.tanh(half * v) + v.dtype.type(1.0))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, x.data.dtype.type(0))
        return _result(out, "relu", [x], lambda g: (g * mask,))
    if kind == "sigmoid":
        out = _sigmoid(x.data)
        return _result(out, "sigmoid", [x], lambda g: (g * out * (1 - out),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; train mode updates the running buffers in place."""
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    shape = (1, c, 1, 1)
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise ValueError("batchnorm train mode on an empty batch")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    dt = x.data.dtype
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean.astype(dt).reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if mode == "train":
                m = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (invstd.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd.reshape(shape)
        return dx, dgamma, dbeta

    return _result(out, f"batchnorm-{mode}", [x, gamma, beta], backward_fn)


# --------------------------------------------------------------------------
# shape plumbing and reductions


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward_fn(g):
        grads = []
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _result(out, "concat", list(xs), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, "reshape", [x], lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, "sum", [x], lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaf gradients are summed into existing buffers. The tape behind ``loss``
    is consumed; calling again on the same loss raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this loss; rebuild the forward pass first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    loss._consumed = True
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# --------------------------------------------------------------------------
# gradient checking


class GradCheck(float):
    """Max relative error of a gradient check; ``passed`` compares with the tolerance."""

    tolerance: float

    def __new__(cls, value: float, tolerance: float):
        obj = super().__new__(cls, value)
        obj.tolerance = tolerance
        return obj

    @property
    def passed(self) -> bool:
        return float(self) < self.tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
               tolerance: float = 1e-5) -> GradCheck:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(*leaves)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        base = [t.data.astype(np.float64).copy() for t in inputs]
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*[Tensor(b) for b in base]).data)
            flat[i] = orig - step
            lo = float(fn(*[Tensor(b) for b in base]).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return GradCheck(worst, tolerance)
