"""Dense tensors with a dynamic reverse-mode tape.

Every primitive builds its output eagerly and, when any input tracks
gradients, records a closure mapping the output adjoint to input adjoints.
Elementwise binary ops require identical shapes; use ``broadcast_to`` to
expand an operand explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def zero_grad(self):
        self.grad = None

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        Interior adjoints live only for the duration of the call, so calling
        ``backward`` twice on the same graph adds the leaf gradients twice.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        adjoints = {id(self): grad}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (broadcast explicitly)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _result(a.data + float(c), (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def power(a: Tensor, p) -> Tensor:
    """``a ** p`` elementwise; ``p`` is a float or a same-shape tensor.

    A tensor exponent needs ``a > 0`` for its gradient (``log a``).
    """
    if not isinstance(p, Tensor):
        pf = float(p)
        out = np.power(a.data, pf)
        return _result(out, (a,), lambda g: (g * pf * np.power(a.data, pf - 1.0),))
    _same_shape(a, p, "power")
    out = np.power(a.data, p.data)

    def backward(g):
        ga = g * p.data * np.power(a.data, p.data - 1.0) if a.requires_grad else None
        gp = g * out * np.log(a.data) if p.requires_grad else None
        return ga, gp

    return _result(out, (a, p), backward)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip values; the gradient is zero wherever the clip is active."""
    out = np.clip(a.data, lo, hi)
    passed = np.ones(a.shape, dtype=bool)
    if lo is not None:
        passed &= a.data > lo
    if hi is not None:
        passed &= a.data < hi
    return _result(out, (a,), lambda g: (g * passed,))


def relu(a: Tensor) -> Tensor:
    return clamp(a, lo=0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, (a,), backward)


# -- shape manipulation ---------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {tuple(shape)}") from exc
    return _result(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, src),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def index(a: Tensor, key) -> Tensor:
    out = a.data[key]
    src, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), (a,), backward)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- linear algebra and normalization -------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine params must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        ga = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (a, gamma, beta), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# -- sampling -------------------------------------------------------------
def bilinear_sample(value: Tensor, grid_hw: tuple, loc: Tensor) -> Tensor:
    """Bilinearly sample per-head token grids at normalized locations.

    value: ``[B, h*w, M, c]`` tokens in row-major grid order.
    loc:   ``[B, Q, M, P, 2]`` normalized ``(x, y)``; token ``(i, j)`` sits at
           ``((j + 0.5) / w, (i + 0.5) / h)``.
    Returns ``[B, Q, M, P, c]``. Neighbors outside the grid read as zero.
    """
    h, w = grid_hw
    B, N, M, C = value.shape
    if N != h * w:
        raise DimensionError(f"bilinear_sample: {N} tokens do not fill a {h}x{w} grid")
    if loc.ndim != 5 or loc.shape[0] != B or loc.shape[2] != M or loc.shape[4] != 2:
        raise DimensionError(f"bilinear_sample: bad location shape {loc.shape}")
    Q, P = loc.shape[1], loc.shape[3]

    px = loc.data[..., 0] * w - 0.5
    py = loc.data[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    # flat row index into value viewed as [B*M*N, C]
    vflat = np.transpose(value.data, (0, 2, 1, 3)).reshape(B * M * N, C)
    base = (np.arange(B)[:, None, None, None] * M + np.arange(M)[None, None, :, None]) * N

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        rows = base + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        corners.append((rows, valid, wx, wy, dx, dy))

    out = np.zeros((B, Q, M, P, C), dtype=value.dtype)
    gathered = []
    for rows, valid, wx, wy, _, _ in corners:
        v = vflat[rows] * valid[..., None]
        gathered.append(v)
        out += (wx * wy)[..., None] * v

    def backward(g):
        gv = gl = None
        if value.requires_grad:
            acc = np.zeros((B * M * N, C), dtype=value.dtype)
            for rows, valid, wx, wy, _, _ in corners:
                contrib = g * ((wx * wy) * valid)[..., None]
                np.add.at(acc, rows.reshape(-1), contrib.reshape(-1, C))
            gv = np.transpose(acc.reshape(B, M, N, C), (0, 2, 1, 3))
        if loc.requires_grad:
            gx = np.zeros(px.shape, dtype=value.dtype)
            gy = np.zeros(px.shape, dtype=value.dtype)
            for (rows, valid, wx, wy, dx, dy), v in zip(corners, gathered):
                proj = np.sum(g * v, axis=-1)
                gx += proj * (1.0 if dx else -1.0) * wy
                gy += proj * (1.0 if dy else -1.0) * wx
            gl = np.stack([gx * w, gy * h], axis=-1)
        return gv, gl

    return _result(out, (value, loc), backward)
