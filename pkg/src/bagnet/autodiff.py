"""Dense tensors with reverse-mode automatic differentiation.

The op set is exactly what a receptive-field-limited convolutional
classifier needs: conv2d (1x1 / 3x3 kernels), batch norm, relu,
residual add, spatial crop and mean, a linear layer, softmax
cross-entropy, plus a few elementwise helpers used by analyses and
tests.

Storage is float32 (float64 leaves are supported for verification
runs); every reduction - conv inner products, means, variances,
weighted sums - accumulates in float64 before casting back. An op that
produces a non-finite value raises NumericalError instead of letting
NaN/Inf flow downstream.

Convolution runs as im2col + matrix multiply. The naive six-loop
reference convolution it is validated against lives with the tests,
not here.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NumericalError(ArithmeticError):
    """An op produced NaN/Inf, or training diverged."""


class MissingGradientError(RuntimeError):
    """Optimizer step requested for a parameter without a gradient."""


_FLOAT_DTYPES = (np.float32, np.float64)
_node_ids = itertools.count()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A node of the compute graph: contiguous row-major float data.

    Leaves are built directly; op outputs carry the op kind, references
    to their input nodes and a backward closure. `node_id` increases
    with creation order, so creation order is a topological order of
    the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "node_id", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if dtype not in _FLOAT_DTYPES:
            raise DimensionError(f"unsupported dtype {dtype}")
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.node_id = next(_node_ids)
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate `grad` on every reachable node with the gradient of this
        scalar; prior gradients on those nodes are overwritten, so repeated
        calls are bitwise identical."""
        if self.data.size != 1:
            raise DimensionError("backward root must be a scalar")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node.parents)
        order = sorted(nodes.values(), key=lambda n: n.node_id, reverse=True)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a scalar tensor")
        return float(self.data.reshape(()))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward=None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    out.parents = tuple(parents)
    out.node_id = next(_node_ids)
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _common_dtype(*tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError("mixed float32/float64 operands")
    return dt


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    _common_dtype(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, "add", (a, b), bw)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors; gradients pass to both."""
    return add(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch {a.shape} vs {b.shape}")
    _common_dtype(a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * c)

    return _result(x.data * np.array(c, dtype=x.data.dtype), "scale", (x,), bw)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient is the 0/1 mask of strictly positive inputs."""
    mask = x.data > 0

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _result(np.maximum(x.data, 0), "relu", (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g.astype(x.data.dtype), x.data.shape))

    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return _result(total, "sum", (x,), bw)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar inner product with a constant weight array (f64 accumulation)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionError(f"weighted_sum shape mismatch {x.shape} vs {w.shape}")

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * w)

    total = np.asarray(np.sum(x.data.astype(np.float64) * w), dtype=x.data.dtype)
    return _result(total, "weighted_sum", (x,), bw)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w spatial window of an [N,C,H,W] tensor."""
    if x.data.ndim != 4 or h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(f"cannot crop {x.shape} to {h}x{w}")
    if (h, w) == x.shape[2:]:
        return x

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, :, :h, :w] = g
            _accumulate(x, full)

    return _result(x.data[:, :, :h, :w], "crop2d", (x,), bw)


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, hin, win = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout = (hin + 2 * pad - k) // stride + 1
    wout = (win + 2 * pad - k) // stride + 1
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, C, Ho, Wo, k, k] -> [N, C*k*k, Ho*Wo]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, hout * wout)
    return np.ascontiguousarray(cols), hout, wout


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, hin, win = x_shape
    hout = (hin + 2 * pad - k) // stride + 1
    wout = (win + 2 * pad - k) // stride + 1
    g = gcols.reshape(n, c, k, k, hout, wout)
    buf = np.zeros((n, c, hin + 2 * pad, win + 2 * pad), dtype=gcols.dtype)
    for ki in range(k):
        for kj in range(k):
            buf[:, :, ki:ki + stride * hout:stride, kj:kj + stride * wout:stride] += g[:, :, ki, kj]
    if pad:
        buf = buf[:, :, pad:-pad, pad:-pad]
    return buf


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k], k in {1,3}.

    Output height is floor((H + 2*zero_pad - k) / stride) + 1; inner
    products accumulate in float64.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    dt = _common_dtype(x, weight)
    n, cin, hin, win = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"kernel must be square with k in {{1,3}}, got {k}x{k2}")
    if cin != cin_w:
        raise DimensionError(f"input has {cin} channels, weight expects {cin_w}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if min(hin, win) + 2 * zero_pad < k:
        raise DimensionError("spatial extent smaller than kernel")

    cols, hout, wout = _im2col(x.data, k, stride, zero_pad)
    cols64 = cols.astype(np.float64)
    w64 = weight.data.reshape(cout, cin * k * k).astype(np.float64)
    out = np.matmul(w64[None], cols64).astype(dt).reshape(n, cout, hout, wout)

    def bw(g):
        gm = g.reshape(n, cout, hout * wout).astype(np.float64)
        if weight.requires_grad:
            gw = np.matmul(gm, cols64.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(w64.T[None], gm)
            _accumulate(x, _col2im(gcols, x.shape, k, stride, zero_pad))

    return _result(out, "conv2d", (x, weight), bw)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Per-channel running statistics; mutated only in train mode."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Channel normalization of [N,C,H,W]; batch stats in train mode, running
    stats in eval mode. Train mode updates `state` with momentum 0.1."""
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects [N,C,H,W]")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one value per channel")
    dt = _common_dtype(x, gamma, beta)
    x64 = x.data.astype(np.float64)
    g64 = gamma.data.astype(np.float64)
    m = n * h * w

    if training:
        if m < 2:
            raise DimensionError("train-mode batch_norm needs N*H*W >= 2")
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x64 - mean[None, :, None, None]) * invstd[None, :, None, None]
        var_unbiased = var * m / max(m - 1, 1)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean.astype(np.float64)
                              + mom * mean).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var.astype(np.float64)
                             + mom * var_unbiased).astype(np.float32)

        def bw(g):
            gy = g.astype(np.float64)
            if beta.requires_grad:
                _accumulate(beta, gy.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accumulate(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxhat = gy * g64[None, :, None, None]
                mean_g = gxhat.mean(axis=(0, 2, 3))
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
                gx = (gxhat - mean_g[None, :, None, None]
                      - xhat * mean_gx[None, :, None, None]) * invstd[None, :, None, None]
                _accumulate(x, gx)
    else:
        rmean = state.running_mean.astype(np.float64)
        rinv = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        xhat = (x64 - rmean[None, :, None, None]) * rinv[None, :, None, None]

        def bw(g):
            gy = g.astype(np.float64)
            if beta.requires_grad:
                _accumulate(beta, gy.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accumulate(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accumulate(x, gy * (g64 * rinv)[None, :, None, None])

    out = (xhat * g64[None, :, None, None]
           + beta.data.astype(np.float64)[None, :, None, None]).astype(dt)
    return _result(out, "batch_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reductions and the classifier head

def spatial_mean(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] mean over space; each location gets 1/(H*W) of the
    gradient."""
    if x.data.ndim != 4:
        raise DimensionError("spatial_mean expects [N,C,H,W]")
    n, c, h, w = x.shape

    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    out = x.data.astype(np.float64).mean(axis=(2, 3)).astype(x.data.dtype)
    return _result(out, "spatial_mean", (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map [N,D] @ [K,D]^T (+ [K]); float64 accumulation."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear input dim {x.shape[1]} vs weight dim {weight.shape[1]}")
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError("bias shape must be [K]")
        parents.append(bias)
    dt = _common_dtype(*parents)
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out64 = x64 @ w64.T
    if bias is not None:
        out64 = out64 + bias.data.astype(np.float64)[None, :]

    def bw(g):
        g64 = g.astype(np.float64)
        if x.requires_grad:
            _accumulate(x, g64 @ w64)
        if weight.requires_grad:
            _accumulate(weight, g64.T @ x64)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g64.sum(axis=0))

    return _result(out64.astype(dt), "linear", parents, bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Numerically stabilized by row-max subtraction; the logit gradient is
    (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [N,K] logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("labels must be one int per row")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise DimensionError(f"label out of range [0,{k})")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bw(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            _accumulate(logits, grad * (float(g.reshape(())) / n))

    return _result(np.asarray(loss, dtype=logits.data.dtype), "softmax_cross_entropy",
                   (logits,), bw)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (float64), rows summing to 1."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# parameters and the optimizer

class Parameter:
    """Named trainable tensor with a zero-initialized momentum buffer."""

    def __init__(self, name: str, value: Tensor):
        value.requires_grad = True
        self.name = name
        self.value = value
        self.momentum = np.zeros_like(value.data)

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float) -> None:
    """Classical momentum update: v <- momentum*v + grad; p <- p - lr*v."""
    for p in params:
        if p.value.grad is None:
            raise MissingGradientError(f"no gradient for parameter {p.name!r}")
        p.momentum = momentum * p.momentum + p.value.grad
        p.value.data = p.value.data - lr * p.momentum
        _check_finite(p.value.data, "sgd_momentum_step")


def fanin_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float32) -> np.ndarray:
    """He-style init: normal with std sqrt(2 / fan_in)."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)
