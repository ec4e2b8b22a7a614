"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op is a numpy kernel plus a closure that
maps the output gradient to input gradients. Broadcasting follows numpy
(trailing-axis alignment). Tensors are never mutated after creation.

Coordinate convention used by every spatial op (``bilinear_sample``,
``conv2d`` placement): pixel ``(i, j)`` of an ``H x W`` grid has its *center*
at ``x = j, y = i``; ``x`` grows rightward and ``y`` downward.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "relu",
    "leaky_relu",
    "softplus",
    "log",
    "exp",
    "sqrt",
    "abs_",
    "clamp",
    "square",
    "matmul",
    "sum_",
    "mean",
    "max_",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "softmax",
    "softmax2d",
    "conv2d",
    "conv1d",
    "bilinear_sample",
    "sample_frames",
    "huber",
    "l2_normalize",
    "backward",
    "numerical_grad",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            pass
        elif min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    return Tensor(data, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, like)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s) in output of shape {out.shape}")


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    t.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.dtype for t in ts])


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    elif isinstance(b, Tensor):
        a = _as_tensor(a, b)
    else:
        a, b = Tensor(a), Tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from exc
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return _make(out, "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data).astype(a.dtype)
    return _make(out, "leaky_relu", (a,), lambda g: (np.where(mask, g, slope * g),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out.astype(x.dtype), "softplus", (a,), lambda g: (g * sig,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, "sqrt", (a,), bw)


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _make(out, "clamp", (a,), lambda g: (g * inside,))


_UNARY = {
    "neg": neg,
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "abs": abs_,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (``clamp`` takes ``lo``/``hi``)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "clamp":
        return clamp(a, **kwargs)
    if kind in _UNARY:
        return _UNARY[kind](a, **kwargs)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), "mean", (a,), bw)


def max_(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _make(out, "max", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, "stack", tensors, bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        rows = gm.reshape(indices.size, -1)
        n_src = a.shape[axis]
        scatter = sparse.csr_matrix(
            (np.ones(indices.size, dtype=rows.dtype), (indices.reshape(-1), np.arange(indices.size))),
            shape=(n_src, indices.size),
        )
        moved = np.asarray(scatter @ rows).reshape((n_src,) + gm.shape[indices.ndim :])
        return (np.moveaxis(moved, 0, axis),)

    return _make(out, "take", (a,), bw)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic_index(index)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out, copy=True), "getitem", (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands need ndim >= 2."""
    a, b = _binary_operands_matmul(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), bw)


def _binary_operands_matmul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a, b


def softmax(a: Tensor, axes: Sequence[int] = (-1,)) -> Tensor:
    """Softmax over ``axes`` jointly, stabilised by max subtraction."""
    axes = _norm_axes(tuple(axes), a.ndim)
    x = a.data - np.max(a.data, axis=axes, keepdims=True)
    e = np.exp(x)
    out = e / np.sum(e, axis=axes, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axes, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def softmax2d(logits: Tensor) -> Tensor:
    """Spatial softmax over the trailing ``H x W`` axes."""
    return softmax(logits, axes=(-2, -1))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    norm = sqrt(add(sum_(square(a), axis=axis, keepdims=True), eps))
    return div(a, norm)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero 'same' padding.

    ``x`` is ``H x W x Cin`` or ``N x H x W x Cin``; ``kernel`` is
    ``k x k x Cin x Cout`` with odd ``k``. Output spatial size is
    ``ceil(H / stride) x ceil(W / stride)`` and output cell ``(i, j)`` is
    centred on input pixel ``(stride*i, stride*j)``.
    """
    kernel = _as_tensor(kernel, x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    k = kernel.shape[0]
    if k % 2 == 0 or kernel.shape[1] != k:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape}")
    if kernel.shape[2] != xd.shape[-1]:
        raise ValueError(f"channel mismatch: input has {xd.shape[-1]}, kernel expects {kernel.shape[2]}")
    n, h, w, cin = xd.shape
    cout = kernel.shape[3]
    p = k // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    kd = kernel.data
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(xd, kd))
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] @ kd[i, j]

    def bw(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        gflat = g4.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gk[i, j] = xp[sl].reshape(-1, cin).T @ gflat
                gxp[sl] += g4 @ kd[i, j].T
        gx = gxp[:, p : p + h, p : p + w, :]
        if squeeze:
            gx = gx[0]
        return gx, gk

    return _make(out[0] if squeeze else out, "conv2d", (x, kernel), bw)


def conv1d(x: Tensor, kernel: Tensor, padding: str = "edge") -> Tensor:
    """Temporal convolution of ``N x T x Cin`` with a ``k x Cin x Cout`` kernel.

    ``padding='edge'`` replicates the first/last step so a constant sequence
    maps to a constant sequence.
    """
    kernel = _as_tensor(kernel, x)
    n, t, cin = x.shape
    k, kcin, cout = kernel.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    p = k // 2
    mode = {"edge": "edge", "zero": "constant"}[padding]
    xp = np.pad(x.data, ((0, 0), (p, p), (0, 0)), mode=mode)
    kd = kernel.data
    out = np.zeros((n, t, cout), dtype=np.result_type(xp, kd))
    for j in range(k):
        out += xp[:, j : j + t] @ kd[j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        gflat = g.reshape(-1, cout)
        for j in range(k):
            gk[j] = xp[:, j : j + t].reshape(-1, cin).T @ gflat
            gxp[:, j : j + t] += g @ kd[j].T
        gx = gxp[:, p : p + t].copy()
        if padding == "edge" and p:
            gx[:, 0] += gxp[:, :p].sum(axis=1)
            gx[:, -1] += gxp[:, p + t :].sum(axis=1)
        return gx, gk

    return _make(out, "conv1d", (x, kernel), bw)


# ---------------------------------------------------------------------------
# sampling


def _bilinear(f: np.ndarray, frame: np.ndarray, x: np.ndarray, y: np.ndarray, h: int, w: int):
    """Sample rows of ``f`` (``F*h*w x C``) at ``(x, y)`` on frames ``frame``.

    Returns the ``M x C`` samples and a function mapping their gradient to
    ``(grad_f, grad_x, grad_y)``.
    """
    x0f, y0f = np.floor(x), np.floor(y)
    fx, fy = (x - x0f).astype(f.dtype), (y - y0f).astype(f.dtype)
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    base = frame.astype(np.int64) * (h * w)
    idx, vals, wts = [], [], []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            cx, cy = x0 + dx, y0 + dy
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = base + np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
            idx.append(flat)
            vals.append(f[flat] * valid[:, None])
            wts.append(wx * wy * valid)
    v00, v01, v10, v11 = vals
    out = v00 * wts[0][:, None] + v01 * wts[1][:, None] + v10 * wts[2][:, None] + v11 * wts[3][:, None]

    def bw(g):
        m = g.shape[0]
        scatter = sparse.csr_matrix(
            (np.concatenate(wts).astype(f.dtype), (np.concatenate(idx), np.tile(np.arange(m), 4))),
            shape=(f.shape[0], m),
        )
        gf = np.asarray(scatter @ g)
        d00, d01, d10, d11 = (np.einsum("mc,mc->m", g, v) for v in vals)
        gx = (1 - fy) * (d01 - d00) + fy * (d11 - d10)
        gy = (1 - fx) * (d10 - d00) + fx * (d11 - d01)
        return gf, gx, gy

    return out, bw


def bilinear_sample(field: Tensor, xy: Tensor) -> Tensor:
    """Bilinearly sample ``field`` at continuous pixel-center coordinates.

    ``field`` is ``[B...] x H x W x C`` and ``xy`` is ``[B...] x N x 2`` with
    identical leading batch dims; result is ``[B...] x N x C``. ``xy[..., 0]``
    is x (column), ``xy[..., 1]`` is y (row). Integer coordinates return the
    stored value exactly. Reads outside the grid are zero, so a sample half a
    pixel past the border blends toward black.
    """
    xy = _as_tensor(xy, field)
    batch = field.shape[:-3]
    if xy.shape[:-2] != batch or xy.shape[-1] != 2:
        raise ValueError(f"xy shape {xy.shape} incompatible with field {field.shape}")
    h, w, c = field.shape[-3:]
    n = xy.shape[-2]
    b = int(np.prod(batch)) if batch else 1
    pts = xy.data.reshape(b * n, 2)
    frame = np.repeat(np.arange(b), n)
    out, core_bw = _bilinear(field.data.reshape(b * h * w, c), frame, pts[:, 0], pts[:, 1], h, w)

    def bw(g):
        gf, gx, gy = core_bw(g.reshape(b * n, c))
        return gf.reshape(field.shape), np.stack([gx, gy], axis=-1).astype(xy.dtype).reshape(xy.shape)

    return _make(out.reshape(*batch, n, c), "bilinear_sample", (field, xy), bw)


def sample_frames(field: Tensor, frame: np.ndarray, xy: Tensor) -> Tensor:
    """Sample ``field[frame[m]]`` (``F x H x W x C``) at ``xy[m]``; returns ``M x C``.

    Same convention and zero-outside rule as ``bilinear_sample``.
    """
    xy = _as_tensor(xy, field)
    frame = np.asarray(frame, dtype=np.int64).reshape(-1)
    F, h, w, c = field.shape
    if xy.shape != (frame.size, 2):
        raise ValueError(f"xy shape {xy.shape} does not match {frame.size} frame indices")
    if frame.size and (frame.min() < 0 or frame.max() >= F):
        raise IndexError("frame index out of range")
    out, core_bw = _bilinear(field.data.reshape(F * h * w, c), frame, xy.data[:, 0], xy.data[:, 1], h, w)

    def bw(g):
        gf, gx, gy = core_bw(g)
        return gf.reshape(field.shape), np.stack([gx, gy], axis=-1).astype(xy.dtype)

    return _make(out, "sample_frames", (field, xy), bw)


# ---------------------------------------------------------------------------
# losses


def huber(diff: Tensor, knee: float = 1.0) -> Tensor:
    """Huber penalty of the L2 norm of the last axis of ``diff``.

    ``d^2/2`` below ``knee`` and ``knee*(d - knee/2)`` above; the gradient is
    continuous at the knee and exactly zero at ``d = 0``.
    """
    v = diff.data
    d2 = np.sum(v * v, axis=-1)
    d = np.sqrt(d2)
    inside = d < knee
    out = np.where(inside, 0.5 * d2, knee * (d - 0.5 * knee)).astype(v.dtype)

    def bw(g):
        safe = np.where(inside, 1.0, d)
        scale = np.where(inside, 1.0, knee / safe)
        return ((g * scale)[..., None] * v,)

    return _make(out, "huber", (diff,), bw)


# ---------------------------------------------------------------------------
# graph and backward


@dataclass
class Graph:
    """Topologically ordered view of the ops reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        leaves: list[Tensor] = []
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
            if not node._parents:
                if node.requires_grad:
                    leaves.append(node)
                continue
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(nodes=order, leaves=leaves)

    def contains(self, t: Tensor) -> bool:
        ids = {id(n) for n in self.nodes} | {id(n) for n in self.leaves}
        return id(t) in ids


def backward(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get a zero gradient.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        graph = Graph.build(loss)
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            keep = any(node is t for t in wrt)
            if keep:
                grads[id(node)] = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=parent.dtype)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# ---------------------------------------------------------------------------
# finite differences


def _differences(fn: Callable[[], Tensor], x: Tensor, h: float, indices) -> tuple[np.ndarray, np.ndarray]:
    """``f(x + h e_i)`` and ``f(x - h e_i)`` for each probed entry (perturbed in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    fp = np.zeros(flat.size, dtype=np.float64)
    fm = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp[i] = float(fn().data)
        flat[i] = orig - h
        fm[i] = float(fn().data)
        flat[i] = orig
    return fp, fm


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    fp, fm = _differences(fn, x, h, indices)
    return ((fp - fm) / (2 * h)).reshape(x.shape)


def _rel(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-3,
) -> float:
    """Worst elementwise relative error between analytic and numeric gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` against the central
    difference. Piecewise-linear ops (relu, bilinear cells) can put a kink
    inside ``[x - h, x + h]``; there the two one-sided differences disagree by
    more than ``kink_tol`` and the analytic value is also accepted against
    either of them. With ``max_entries`` only a random subset of each
    input's entries is probed.
    """
    loss = fn()
    f0 = float(loss.data)
    analytic = backward(loss, inputs)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        idx = None
        if max_entries is not None and x.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(x.data.size, size=max_entries, replace=False)
        fp, fm = _differences(fn, x, h, idx)
        sel = np.arange(x.data.size) if idx is None else np.asarray(idx)
        a = ga.reshape(-1).astype(np.float64)[sel]
        central = (fp[sel] - fm[sel]) / (2 * h)
        fwd = (fp[sel] - f0) / h
        bwd = (f0 - fm[sel]) / h
        err = _rel(a, central, floor)
        kink = _rel(fwd, bwd, floor) > kink_tol
        err = np.where(kink, np.minimum(err, np.minimum(_rel(a, fwd, floor), _rel(a, bwd, floor))), err)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
