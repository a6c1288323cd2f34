"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a :class:`Node` holding its parents
and a closure computing the vector-Jacobian product.  Nodes carry a global
creation ordinal, so the reachable part of the tape can be replayed in
exact reverse creation order without an explicit topological search.

The tape is per forward pass: after :func:`backward` runs, the visited nodes
are marked consumed and release their saved arrays.  A second backward
through the same nodes is an error.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericalError, ShapeError

_seq = itertools.count()
_local = threading.local()

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = os.environ.get("UMONO_CHECK_FINITE", "0") not in ("", "0")


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(bits: int):
    """Temporarily switch the default float precision (32 or 64 bits)."""
    old = _DEFAULT_DTYPE
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(old)


def set_check_finite(flag: bool) -> None:
    """Raise :class:`NumericalError` whenever a forward op yields NaN/Inf."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    old = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


def _as_array(value, dtype=None):
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    elif arr.dtype.kind in "iub" or arr.dtype == np.float64 and dtype is None:
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    """Dense real array with an optional gradient slot and tape identity."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    def backward(self):
        backward(self)

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a=-2, b=-1):
        return swapaxes(self, a, b)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(_as_array(x, dtype))


def _make(op, data, parents, backward_fn):
    if _CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    rg = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, rg)
    if rg:
        out._node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product with broadcasting."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("hadamard_mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    ad = a.data
    p = exponent
    return _make("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a scalar; gradient flows where a > floor."""
    a = _lift(a)
    ad = a.data
    keep = ad > floor
    return _make("maximum", np.where(keep, ad, np.asarray(floor, ad.dtype)), (a,),
                 lambda g: (g * keep,))


# -- elementwise unary -----------------------------------------------------

def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0 (subgradient)."""
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype),)

    return _make("sqrt", out, (a,), bw)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tabs(a) -> Tensor:
    a = _lift(a)
    sgn = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def swapaxes(a, ax1=-2, ax2=-1) -> Tensor:
    a = _lift(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {src} to {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def getitem(a, index) -> Tensor:
    a = _lift(a)
    src, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.asarray(a.data[index]), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    a = _lift(a)
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return _make("pad2d", np.pad(a.data, widths), (a,),
                 lambda g: (g[..., pad:-pad, pad:-pad],))


def unfold2d(a, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Sliding windows of ``[B, C, H, W]`` as ``[B, C, kh, kw, H', W']``."""
    a = _lift(a)
    if a.ndim != 4:
        raise ShapeError(f"unfold2d expects a 4-d input, got {a.shape}")
    b, c, h, w = a.shape
    if h < kh or w < kw:
        raise ShapeError(f"unfold2d: kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(a.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    dtype = a.dtype

    def bw(g):
        full = np.zeros((b, c, h, w), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + stride * (ho - 1) + 1:stride,
                     j:j + stride * (wo - 1) + 1:stride] += g[:, :, i, j]
        return (full,)

    return _make("unfold2d", out, (a,), bw)


# -- linear algebra and softmax -----------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting over leading axes."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch axes of {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


# -- backward pass ------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise GraphError("loss is detached from any computation graph")
    if node.consumed:
        raise GraphError("backward already ran through this graph; run a fresh forward pass")

    order = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        order.append(t)
        for p in t._node.parents:
            if p._node is not None and p.requires_grad and id(p) not in seen:
                if p._node.consumed:
                    raise GraphError("graph contains nodes already consumed by a previous backward")
                seen.add(id(p))
                stack.append(p)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        n = t._node
        if g is not None:
            pgrads = n.backward_fn(g)
            for p, pg in zip(n.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        n.consumed = True
        n.backward_fn = None


# -- verification oracle ------------------------------------------------

def finite_diff_check(f, x: Tensor, step=1e-6, eps: float = 1e-8,
                      max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor ``x`` (which must be a leaf) to a scalar tensor; it
    may close over other tensors.  Per element the error is
    ``|a - c| / (|a| + |c| + eps)``.  With ``max_elements`` only a seeded
    random subset of coordinates is perturbed.

    ``step`` may be a sequence of step sizes; each coordinate then keeps its
    best agreement across them (stopping early below ``1e-7``).  This guards
    against a probe pair straddling a kink (ReLU, clamp), where one step size
    sees a one-sided slope.
    """
    if not x.is_leaf:
        raise GraphError("finite_diff_check needs a leaf tensor")
    steps = tuple(step) if np.iterable(step) else (step,)
    old_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        backward(loss)
        analytic = np.zeros(x.shape, x.dtype) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = old_rg
        x.grad = None

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, max_elements, replace=False))
    worst = 0.0
    with no_grad():
        for i in idx:
            a = float(analytic.reshape(-1)[i])
            best = np.inf
            for h in steps:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data)
                flat[i] = orig - h
                fm = float(f(x).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                best = min(best, abs(a - num) / (abs(a) + abs(num) + eps))
                if best < 1e-7:  # agreement already well past any tolerance in use
                    break
            worst = max(worst, best)
    return worst
