"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` holding a contiguous float64 buffer.
When any input requires a gradient (and grad mode is on), the output
remembers its parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks that graph once in reverse
topological order.

Shape rules follow numpy: elementwise ops broadcast, ``matmul`` broadcasts
batch dimensions, reductions take an ``axis``.  Mismatches raise
:class:`ShapeError` naming the op and both shapes.
"""

import contextlib
import math
import os

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "ShapeError", "tensor", "zeros", "backward", "no_grad",
    "set_check_finite", "topological_order",
    "add", "sub", "mul", "div", "neg", "matmul", "tanh", "sigmoid", "relu",
    "abs", "exp", "log", "softmax", "log_softmax", "layer_norm", "mean",
    "sum", "reshape", "transpose", "swap_last", "concat", "stack",
    "conv2d", "avg_pool2d", "scaled_dot_product_attention",
]

_check_finite = os.environ.get("RVT_CHECK_FINITE", "1") not in ("", "0")
_grad_enabled = True


class ShapeError(ValueError):
    pass


def set_check_finite(flag):
    """Toggle the per-op NaN/Inf check. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(flag)
    return prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray op Tensor defer to Tensor's reflected methods

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _check_finite and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check("div", a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Matrix product with numpy batch broadcasting.

    ``a`` may be 1-D (a row vector) or N-D; ``b`` must be at least 2-D.
    """
    a, b = _lift(a), _lift(b)
    if b.ndim < 2 or a.ndim < 1 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim == 1:
        def bw(g):
            ga = b.data @ g if a.requires_grad else None
            gb = np.outer(a.data, g) if b.requires_grad else None
            return ga, gb
    else:
        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb
    return _make(np.ascontiguousarray(a.data @ b.data), (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# pointwise nonlinearities
# --------------------------------------------------------------------------

def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def abs(a):
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softmax(a, axis=-1):
    if axis not in (-1, a.ndim - 1):
        raise ShapeError(f"softmax: only the last axis is supported, got axis={axis}")
    shape = a.shape
    y2 = _kernels.softmax_fwd(a.data.reshape(-1, shape[-1]))

    def bw(g):
        return (_kernels.softmax_bwd(g.reshape(y2.shape), y2).reshape(shape),)

    return _make(y2.reshape(shape), (a,), bw, "softmax")


def log_softmax(a):
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    y = a.data - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), bw, "log_softmax")


def layer_norm(a, ndim=1, eps=1e-10):
    """Normalize over the trailing ``ndim`` axes to zero mean, unit variance.

    No affine transform; compose with ``mul``/``add`` for gain and bias.
    """
    if ndim < 1 or ndim > a.ndim:
        raise ShapeError(f"layer_norm: cannot normalize {ndim} trailing axes of shape {a.shape}")
    shape = a.shape
    d = int(np.prod(shape[a.ndim - ndim:]))
    y2, rstd = _kernels.layernorm_fwd(a.data.reshape(-1, d), eps)

    def bw(g):
        return (_kernels.layernorm_bwd(g.reshape(y2.shape), y2, rstd).reshape(shape),)

    return _make(y2.reshape(shape), (a,), bw, "layer_norm")


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.ascontiguousarray(np.broadcast_to(g.reshape(kept), shape)),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.ascontiguousarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def bw(g):
        return (np.ascontiguousarray(np.broadcast_to(g.reshape(kept) / count, shape)),)

    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.ascontiguousarray(out, dtype=np.float64), (a,), bw, "mean")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: shapes {ref} and {t.shape} differ")
    ax = axis % (len(ref) + 1)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=ax)) if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _make(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), bw, "stack")


def _getitem(a, idx):
    out = a.data[idx]
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = np.reshape(g, out.shape)
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(out, dtype=np.float64), (a,), bw, "getitem")


# --------------------------------------------------------------------------
# convolution, pooling, attention
# --------------------------------------------------------------------------

def conv2d(x, w, b=None, padding=0):
    """Stride-1 cross-correlation.

    x: (B, C_in, H, W); w: (C_out, C_in, kh, kw); b: (C_out,) or None.
    Returns (B, C_out, H + 2*padding - kh + 1, W + 2*padding - kw + 1).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} are incompatible")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p = int(padding)
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _kernels.im2col(xp, kh, kw).reshape(bsz * ho * wo, cin * kh * kw)
    w2 = w.data.reshape(cout, -1)
    out2 = cols @ w2.T
    out = np.ascontiguousarray(out2.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, w)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = _kernels.col2im(gcols, hp, wp)
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + wd]) if p else gxp
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x, k):
    """Non-overlapping k x k mean pooling over the last two axes of (B, C, H, W)."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avg_pool2d: shape {x.shape} not divisible by window {k}")
    out = _kernels.avgpool_fwd(x.data, int(k))
    return _make(out, (x,), lambda g: (_kernels.avgpool_bwd(g, int(k)),), "avg_pool2d")


def scaled_dot_product_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes, built from primitives."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores), v)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward: root is not attached to a graph with trainable leaves")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else gp
