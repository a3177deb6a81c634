"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Everything is numpy underneath. A ``Tensor`` wraps an ndarray and, when
gradients are enabled, remembers the operation that produced it as a
closure over its parents. ``backward`` replays the resulting graph once in
reverse topological order and accumulates gradients on every leaf that has
``requires_grad`` set.

The engine runs in float32 by default; gradient checking needs float64,
which the :func:`default_dtype` context switches on for everything created
inside it.
"""

from __future__ import annotations

import contextlib
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_default_dtype = np.float32
_grad_enabled = True
_nan_checks = False


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_nan_checks():
    """Assert that no op writes NaN/Inf while the block is active."""
    global _nan_checks
    prev = _nan_checks
    _nan_checks = True
    try:
        yield
    finally:
        _nan_checks = prev


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus an optional gradient record.

    ``grad`` is populated by :func:`backward` on leaves (and on any node
    where ``retain_grad`` was requested) and accumulates additively across
    repeated backward calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None
        self._retain = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph management ----------------------------------------------

    def retain_grad(self):
        """Keep this node's gradient after backward even if it is not a leaf."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data with no history."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._retain = False
        return out

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create a result tensor, recording the op if gradients are live."""
    if _nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._retain = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) on every reachable requires_grad leaf.

    Repeated calls without ``zero_grad`` add up, per the accumulation
    contract. ``loss`` must be a scalar (a single element).
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    # one reverse-topological pass; each node visited exactly once
    order: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        is_leaf = node._backward is None
        if is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics)
# ---------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _node(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    out = np.where(mask, a.data, 0)

    def bw(g):
        return (g * mask,)

    return _node(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------
# reductions and reshapes
# ---------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims).copy(),)

    return _node(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / np.asarray(out).size

    def bw(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return _node(np.asarray(out), (a,), bw)


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first argmax (lowest index)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        gx = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return _node(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), bw)


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())

    def bw(g):
        gp = g * 2.0 * diff / diff.size
        return gp, -gp

    return _node(out, (pred, target), bw)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels needs matching B,H,W: {a.shape} vs {b.shape}"
        )
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return _node(out, (a, b), bw)


# ---------------------------------------------------------------------
# convolution / pooling / upsampling
# ---------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with grouping.

    ``groups == C_in`` gives a depthwise convolution; kernel 1 a pointwise
    projection. Weight layout is (C_out, C_in/groups, k, k).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got {weight.shape}")
    B, C, H, W = x.data.shape
    Co, Cg, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k, s, p = kh, stride, padding
    if C % groups != 0 or Co % groups != 0:
        raise ShapeError(f"groups={groups} must divide C_in={C} and C_out={Co}")
    if Cg != C // groups:
        raise ShapeError(
            f"weight expects {Cg} channels per group, input provides {C // groups}"
        )
    if bias is not None and bias.data.shape != (Co,):
        raise ShapeError(f"bias must have shape ({Co},), got {bias.data.shape}")
    if (H + 2 * p - k) % s or (W + 2 * p - k) % s:
        raise ShapeError("padding/stride do not give an integer output size")
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("kernel larger than padded input")

    if k == 1 and groups == 1 and s == 1 and p == 0:
        out, bw = _conv_pointwise(x, weight, bias, B, C, H, W, Co)
    elif groups == C and Cg == 1:
        out, bw = _conv_depthwise(x, weight, bias, k, s, p, Ho, Wo)
    else:
        out, bw = _conv_generic(x, weight, bias, k, s, p, groups, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def _conv_pointwise(x, weight, bias, B, C, H, W, Co):
    """1x1 ungrouped conv as a batched matmul (the hot path)."""
    w2 = weight.data.reshape(Co, C)
    xm = x.data.reshape(B, C, H * W)
    out = np.matmul(w2, xm).reshape(B, Co, H, W)

    def bw(g):
        gm = g.reshape(B, Co, H * W)
        gx = np.matmul(w2.T, gm).reshape(B, C, H, W)
        gw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw.reshape(Co, C, 1, 1), gb

    return out, bw


def _conv_depthwise(x, weight, bias, k, s, p, Ho, Wo):
    """groups == C_in: accumulate over kernel offsets, vectorized over
    (batch, channel, multiplier)."""
    B, C, H, W = x.data.shape
    Co = weight.data.shape[0]
    mult = Co // C
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wk = weight.data.reshape(C, mult, k, k)
    out5 = np.zeros((B, C, mult, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i : i + Ho * s : s, j : j + Wo * s : s]
            out5 += xs[:, :, None] * wk[None, :, :, i, j, None, None]
    out = out5.reshape(B, Co, Ho, Wo)

    def bw(g):
        g5 = g.reshape(B, C, mult, Ho, Wo)
        gw = np.zeros_like(wk)
        gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                xs = xp[:, :, i : i + Ho * s : s, j : j + Wo * s : s]
                gw[:, :, i, j] = np.einsum("bcthw,bchw->ct", g5, xs,
                                           optimize=True)
                gxp[:, :, i : i + Ho * s : s, j : j + Wo * s : s] += np.einsum(
                    "bcthw,ct->bchw", g5, wk[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw.reshape(Co, 1, k, k), gb

    return out, bw


def _conv_generic(x, weight, bias, k, s, p, groups, Ho, Wo):
    B, C, H, W = x.data.shape
    Co = weight.data.shape[0]
    Cg = C // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (B, C, Ho, Wo, k, k)
    wing = win.reshape(B, groups, Cg, Ho, Wo, k, k)
    wg = weight.data.reshape(groups, Co // groups, Cg, k, k)
    out = np.einsum("bgchwij,gocij->bgohw", wing, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(B, Co, Ho, Wo))

    def bw(g):
        gg = g.reshape(B, groups, Co // groups, Ho, Wo)
        gw = np.einsum("bgchwij,bgohw->gocij", wing, gg, optimize=True)
        gxp = np.zeros((B, groups, Cg, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, :, i : i + Ho * s : s, j : j + Wo * s : s] += np.einsum(
                    "bgohw,goc->bgchw", gg, wg[:, :, :, i, j], optimize=True
                )
        gx = gxp.reshape(B, C, H + 2 * p, W + 2 * p)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw.reshape(Co, Cg, k, k), gb

    return out, bw


def maxpool2(x) -> Tensor:
    """2x2 max pool, stride 2. Ties route the gradient to the lowest flat index."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 input must be rank 4, got {x.shape}")
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    tiles = (
        x.data.reshape(B, C, Ho, 2, Wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, 4)
    )
    idx = np.argmax(tiles, axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        return (
            gt.reshape(B, C, Ho, Wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H, W),
        )

    return _node(np.ascontiguousarray(out), (x,), bw)


def _upsample_weights(n: int, dtype):
    # half-pixel-center alignment: output o samples input at o/2 - 0.25
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.intp)
    frac = (src - i0).astype(dtype)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    return lo, hi, frac


def _upsample_axis_fwd(a: np.ndarray, axis: int):
    lo, hi, frac = _upsample_weights(a.shape[axis], a.dtype)
    shape = [1] * a.ndim
    shape[axis] = frac.size
    f = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - f) + np.take(a, hi, axis=axis) * f


def _upsample_axis_bwd(g: np.ndarray, n: int, axis: int):
    lo, hi, frac = _upsample_weights(n, g.dtype)
    gm = np.moveaxis(g, axis, 0)
    acc = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
    f = frac.reshape((-1,) + (1,) * (gm.ndim - 1))
    np.add.at(acc, lo, gm * (1 - f))
    np.add.at(acc, hi, gm * f)
    return np.moveaxis(acc, 0, axis)


def bilinear_upsample2(x) -> Tensor:
    """Double H and W by separable bilinear interpolation (half-pixel centers)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample2 input must be rank 4, got {x.shape}")
    B, C, H, W = x.data.shape
    out = _upsample_axis_fwd(_upsample_axis_fwd(x.data, 2), 3)

    def bw(g):
        return (_upsample_axis_bwd(_upsample_axis_bwd(g, W, 3), H, 2),)

    return _node(out, (x,), bw)
