"""Minimal reverse-mode autodiff over numpy arrays.

Implements exactly the operations the models need: broadcast arithmetic,
matmul, 2D convolution (through :mod:`gridkp.kernels`), the usual pointwise
nonlinearities, reductions, channel concat/slice, nearest upsampling, and a
spatial max. Tensors wrap float32 or float64 ndarrays; calling
``backward()`` on a scalar replays the tape in reverse topological order.

Gradient tracking is on by default and can be suspended with
:func:`no_grad` for inference paths.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from gridkp import kernels

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t._backward is None and not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(a.data / b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def sigmoid(t: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-t.data))
    def backward(g):
        _accum(t, g * y * (1.0 - y))
    return _make(y, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    def backward(g):
        _accum(t, g * (1.0 - y * y))
    return _make(y, (t,), backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    def backward(g):
        _accum(t, g * mask)
    return _make(t.data * mask, (t,), backward)


def leaky_relu(t: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(t.data > 0, t.data.dtype.type(1.0), t.data.dtype.type(slope))
    def backward(g):
        _accum(t, g * scale)
    return _make(t.data * scale, (t,), backward)


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)
    def backward(g):
        _accum(t, g * y)
    return _make(y, (t,), backward)


def log(t: Tensor) -> Tensor:
    def backward(g):
        _accum(t, g / t.data)
    return _make(np.log(t.data), (t,), backward)


def softplus(t: Tensor) -> Tensor:
    # log(1 + exp(x)) computed stably for large |x|
    y = np.logaddexp(0.0, t.data).astype(t.data.dtype)
    def backward(g):
        _accum(t, g / (1.0 + np.exp(-t.data)))
    return _make(y, (t,), backward)


def square(t: Tensor) -> Tensor:
    def backward(g):
        _accum(t, 2.0 * g * t.data)
    return _make(t.data * t.data, (t,), backward)


def clip_min(t: Tensor, lo: float) -> Tensor:
    mask = t.data >= lo
    def backward(g):
        _accum(t, g * mask)
    return _make(np.maximum(t.data, lo), (t,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.data.shape).copy())
            return
        gg = g
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % t.data.ndim for a in axes)
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        _accum(t, np.broadcast_to(gg, t.data.shape).copy())
    return _make(t.data.sum(axis=axis, keepdims=keepdims), (t,), backward)


def tmean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = t.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for a in axes:
            n *= t.data.shape[a]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def max_spatial(t: Tensor, keepdims=False) -> Tensor:
    """Max over the last two axes; gradient routes to the first argmax."""
    flat = t.data.reshape(t.data.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        y = y[..., None, None]
    def backward(g):
        gf = np.zeros_like(flat)
        gg = g[..., 0, 0] if keepdims else g
        np.put_along_axis(gf, idx[..., None], gg[..., None], axis=-1)
        _accum(t, gf.reshape(t.data.shape))
    return _make(y, (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    old = t.data.shape
    def backward(g):
        _accum(t, g.reshape(old))
    return _make(t.data.reshape(shape), (t,), backward)


def concat(ts: list, axis: int = 1) -> Tensor:
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * t.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    def backward(g):
        full = np.zeros_like(t.data)
        full[sl] = g
        _accum(t, full)
    return _make(np.ascontiguousarray(t.data[sl]), (t,), backward)


def upsample2x(t: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of [..., H, W]."""
    y = t.data.repeat(2, axis=-2).repeat(2, axis=-1)
    def backward(g):
        s = g.shape
        blocks = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        _accum(t, blocks.sum(axis=(-3, -1)))
    return _make(y, (t,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    y = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)
    kh, kw = w.data.shape[2], w.data.shape[3]
    H, W = x.data.shape[2], x.data.shape[3]
    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or x._parents:
            _accum(x, kernels.conv2d_grad_input(g, w.data, stride, pad, H, W))
        if w.requires_grad or b.requires_grad:
            dw, db = kernels.conv2d_grad_weights(x.data, g, stride, pad, kh, kw)
            _accum(w, dw)
            _accum(b, db)
    return _make(y, (x, w, b), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def spatial_softmax(logits: Tensor) -> Tensor:
    """Per-channel softmax over the last two axes of [..., H, W]."""
    shift = Tensor(logits.data.max(axis=(-2, -1), keepdims=True))
    e = exp(sub(logits, shift))
    return div(e, tsum(e, axis=(-2, -1), keepdims=True))


def straight_through_snap(coord: Tensor, snapped_value: np.ndarray) -> Tensor:
    """Forward the snapped value, backward the identity.

    ``snapped_value`` is the precomputed nearest-grid-center version of
    ``coord.data``; the difference is injected as a constant so gradients
    pass through the snap unchanged.
    """
    return add(coord, Tensor(snapped_value - coord.data))
