"""Dense tensors with reverse-mode automatic differentiation.

Every operation that produces a :class:`Tensor` from inputs that require
gradients records its parents and a backward rule on the output. The
recorded parent links form the tape: a DAG that :func:`backward` walks in
reverse topological order, visiting each node exactly once and summing
gradients from every use of a value.

Arrays are held as numpy arrays. Tests run in float64; training may use
float32 (see :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording the backward rule if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# Backward traversal
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of non-positive arguments only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``
    with ``c = sqrt(2/pi)``."""
    x = a.data
    inner = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# Linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an ``B x C x H x W`` batch.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            n = x.size // c
            unbiased = var.reshape(c) * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(shape).astype(x.dtype)
        xc = x.data - mu
        var = running_var.reshape(shape).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(shape)
    out = xhat * g4 + beta.data.reshape(shape)

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            gh = g * g4
            if training:
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * inv
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int, what: str, shape) -> int:
    if k > n + 2 * pad:
        raise DimensionError(f"{what} kernel {k} larger than padded input {n + 2 * pad} (input shape {shape})")
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # B x C x Ho x Wo x k x k view
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(gw: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: add window gradients back onto the input.

    ``gw`` is laid out ``k x k x B x C x Ho x Wo``.
    """
    out = np.zeros(padded_shape, dtype=gw.dtype)
    ho, wo = gw.shape[4], gw.shape[5]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gw[i, j]
    return out


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``B x C x H x W`` input with ``F x C x k x k`` weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho = _out_size(h, k, stride, pad, "conv2d", x.shape)
    wo = _out_size(wd, k, stride, pad, "conv2d", x.shape)
    wmat = w.data.reshape(f, c * k * k)

    if k == 1 and stride == 1 and pad == 0:
        cols = None
        out = np.einsum("fc,bchw->bfhw", wmat, x.data, optimize=True)
    else:
        xp = _pad(x.data, pad)
        win = _windows(xp, k, stride)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
        out = (cols @ wmat.T).reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if cols is None:
            if w.requires_grad:
                gw = np.einsum("bfhw,bchw->fc", g, x.data, optimize=True).reshape(w.shape)
            if x.requires_grad:
                gx = np.einsum("fc,bfhw->bchw", wmat, g, optimize=True)
            return gx, gw, gb
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            # (C*k*k) x (B*Ho*Wo) keeps the scatter slices contiguous
            gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
            gcols = (wmat.T @ gf).reshape(c, k, k, bsz, ho, wo).transpose(1, 2, 3, 0, 4, 5)
            gx = _unpad(_scatter_windows(gcols, (bsz, c, h + 2 * pad, wd + 2 * pad), k, stride), pad)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def pool(x: Tensor, kind: str = "max", k: int = 2, stride: int | None = None, pad: int = 0) -> Tensor:
    """Max, average or global-average pooling over ``B x C x H x W``."""
    if x.ndim != 4:
        raise DimensionError(f"pool expects 4-D input, got {x.shape}")
    if kind == "global_avg":
        return mean(x, axis=(2, 3), keepdims=True)
    stride = k if stride is None else stride
    bsz, c, h, wd = x.shape
    ho = _out_size(h, k, stride, pad, "pool", x.shape)
    wo = _out_size(wd, k, stride, pad, "pool", x.shape)
    padded_shape = (bsz, c, h + 2 * pad, wd + 2 * pad)

    if kind == "max":
        xp = _pad(x.data, pad, value=-np.inf)
        win = _windows(xp, k, stride).reshape(bsz, c, ho, wo, k * k)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            onehot = np.zeros((bsz, c, ho, wo, k * k), dtype=g.dtype)
            np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
            gw = np.ascontiguousarray(onehot.reshape(bsz, c, ho, wo, k, k).transpose(4, 5, 0, 1, 2, 3))
            return (_unpad(_scatter_windows(gw, padded_shape, k, stride), pad),)

        return _make(np.ascontiguousarray(out), (x,), bw)

    if kind == "avg":
        xp = _pad(x.data, pad)
        out = _windows(xp, k, stride).mean(axis=(-1, -2))

        def bw(g):
            gw = np.broadcast_to(g / (k * k), (k, k, bsz, c, ho, wo))
            return (_unpad(_scatter_windows(gw, padded_shape, k, stride), pad),)

        return _make(np.ascontiguousarray(out), (x,), bw)

    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def numerical_gradient(fn: Callable[[], Tensor], wrt: Iterable[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar ``fn()`` with respect to ``wrt``."""
    grads = []
    with no_grad():
        for t in wrt:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-5, atol: float = 1e-5) -> float:
    """Return the max relative error between analytic and numeric gradients.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, atol)``.
    The ``atol`` floor keeps entries whose true gradient is zero (a key bias
    under softmax, say) from dividing finite-difference round-off by ~0.
    """
    for t in wrt:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    numeric = numerical_gradient(fn, wrt, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
