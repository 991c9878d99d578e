"""Minimal dense tensor with reverse-mode autodiff.

Every differentiable primitive is a :class:`Function` subclass with a
hand-written ``backward``. Storage is float32 unless a caller explicitly asks
for float64 (the gradient checker does); reductions accumulate in float64.

Layout conventions used across the package:

* images / feature maps: ``(N, C, H, W)`` (an unbatched ``(C, H, W)`` is
  accepted by the primitives that the public API describes that way)
* flow fields inside the network: ``(N, 2, H, W)`` with channel 0 = u
  (rightward) and channel 1 = v (downward), in pixels of their own grid
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


class Tensor:
    """Dense n-d float array, optionally tracking gradients.

    ``Tensor(x)`` always stores float32; pass ``dtype=np.float64`` to keep
    double precision (used by gradient checks). Gradients of leaf tensors
    accumulate additively into ``.grad`` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_fn", "_parents", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._fn: Function | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._fn = None
        t._parents = ()
        t.name = None
        return t

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._fn.backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(node._fn).__name__}.backward produced grad {pg.shape} "
                        f"for input {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return Mul.apply(self, _lift(1.0 / other, self))
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Mul.apply(self, _lift(-1.0, self))

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


# ---------------------------------------------------------------------------
# Function machinery
# ---------------------------------------------------------------------------


class Function:
    """A differentiable primitive.

    ``forward`` receives raw arrays (plus keyword options) and returns an
    array; ``backward`` receives dL/d(out) and returns one gradient (or
    ``None``) per positional input.
    """

    needs_grad: tuple[bool, ...] = ()

    @classmethod
    def apply(cls, *inputs: Tensor, **options) -> Tensor:
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in inputs)
        out = Tensor._wrap(fn.forward(*(t.data for t in inputs), **options))
        if _grad_enabled and any(fn.needs_grad):
            out.requires_grad = True
            out._fn = fn
            out._parents = inputs
        return out

    def forward(self, *arrays, **options) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:  # pragma: no cover
        raise NotImplementedError


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


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs_grad[0] else None
        gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims, dtype=np.float64)
        self.count = a.size // max(np.size(out), 1)
        return np.asarray(out, dtype=a.dtype)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(self.axes))),)


class Index(Function):
    def forward(self, a, index):
        self.shape, self.index, self.dtype = a.shape, index, a.dtype
        return np.ascontiguousarray(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        if _fancy(self.index):
            np.add.at(out, self.index, g)
        else:
            out[self.index] += g
        return (out,)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.n = len(arrays)
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=self.axis)) for i in range(self.n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def _open_unit_bound(dtype) -> float:
    # largest representable value strictly below 1
    return float(np.nextafter(dtype.type(1), dtype.type(0)))


class Tanh(Function):
    """tanh, with the output kept strictly inside (-1, 1) in the storage dtype."""

    def forward(self, a):
        lim = _open_unit_bound(a.dtype)
        self.y = np.clip(np.tanh(a), -lim, lim)
        return self.y

    def backward(self, g):
        return (g * (1.0 - self.y * self.y),)


class Sigmoid(Function):
    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.y = out
        return out

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class ELU(Function):
    """ELU with alpha = 1: continuously differentiable and monotone."""

    def forward(self, a):
        self.neg = a < 0
        self.y = np.where(self.neg, np.expm1(np.minimum(a, 0)), a)
        return self.y

    def backward(self, g):
        return (np.where(self.neg, g * (self.y + 1.0), g),)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0, a).astype(a.dtype)

    def backward(self, g):
        s = 0.5 * (1.0 + np.tanh(0.5 * self.a))
        return (g * s,)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return (g * self.sign,)


class Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, g):
        return (g * self.y,)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def elu(x: Tensor) -> Tensor:
    return ELU.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def absolute(x: Tensor) -> Tensor:
    return Abs.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


# ---------------------------------------------------------------------------
# softmax, matmul
# ---------------------------------------------------------------------------


class SoftmaxLastDim(Function):
    def forward(self, a):
        z = a.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.y = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype)
        return self.y

    def backward(self, g):
        y = self.y.astype(np.float64)
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64)
        return ((y * (g - dot)).astype(self.y.dtype),)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted, float64 inside."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    return SoftmaxLastDim.apply(x)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = gb = None
        if self.needs_grad[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(self.b, -1, -2)), self.a.shape)
        if self.needs_grad[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(self.a, -1, -2), g), self.b.shape)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(.., M, K) @ (.., K, N); leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


class Conv2d(Function):
    """Cross-correlation via channels-last im2col.

    input (N, C, H, W), weight (O, C, k, k); columns are laid out
    (N*H'*W', k*k*C) so each tap copies contiguous channel vectors.
    """

    def forward(self, x, w, b, stride=1, padding=0):
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
        self.meta = (x.shape, stride, padding, ho, wo, k)
        xh = x.transpose(0, 2, 3, 1)
        if padding:
            xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        if k == 1 and stride == 1:
            cols = np.ascontiguousarray(xh).reshape(n * ho * wo, c)
        else:
            cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            cols = cols.reshape(n * ho * wo, k * k * c)
        self.cols = cols
        self.w_shape = w.shape
        self.wr = w.transpose(0, 2, 3, 1).reshape(o, k * k * c)
        out = cols @ self.wr.T
        out += b
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, g):
        (n, c, h, wd), stride, padding, ho, wo, k = self.meta
        o = self.w_shape[0]
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = gb = gx = None
        if self.needs_grad[1]:
            gw = np.ascontiguousarray((g2.T @ self.cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        if self.needs_grad[2]:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if self.needs_grad[0]:
            gcols = (g2 @ self.wr).reshape(n, ho, wo, k, k, c)
            if k == 1 and stride == 1:
                gxh = gcols.reshape(n, ho, wo, c)
            else:
                gxh = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
                gxh = gxh[:, padding : padding + h, padding : padding + wd, :]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x`` is (C, H, W) or (N, C, H, W).

    Output extent is ``(H + 2*padding - k) // stride + 1`` per axis.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input and (O,C,k,k) weight, got {x.shape}, {weight.shape}")
    o, c, k, k2 = weight.shape
    if c != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {c}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    if _conv_out(x.shape[2], k, stride, padding) < 1 or _conv_out(x.shape[3], k, stride, padding) < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {k}")
    if bias is None:
        bias = Tensor._wrap(np.zeros(o, dtype=x.dtype))
    elif bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    out = Conv2d.apply(x, weight, bias, stride=stride, padding=padding)
    return out.reshape(out.shape[1:]) if unbatched else out


class AvgPool2d(Function):
    """Mean over kernel x kernel windows of the last two axes; edge windows are truncated."""

    def forward(self, a, kernel):
        h, w = a.shape[-2:]
        ho, wo = -(-h // kernel), -(-w // kernel)
        self.meta = (a.shape, kernel, ho, wo)
        ph, pw = ho * kernel - h, wo * kernel - w
        lead = a.shape[:-2]
        x = a.astype(np.float64)
        if ph or pw:
            x = np.pad(x, [(0, 0)] * len(lead) + [(0, ph), (0, pw)])
        s = x.reshape(*lead, ho, kernel, wo, kernel).sum(axis=(-3, -1))
        self.counts = _window_counts(h, w, kernel)
        return (s / self.counts).astype(a.dtype)

    def backward(self, g):
        shape, kernel, ho, wo = self.meta
        h, w = shape[-2:]
        gs = g / self.counts
        up = np.repeat(np.repeat(gs, kernel, axis=-2), kernel, axis=-1)
        return (np.ascontiguousarray(up[..., :h, :w]).astype(g.dtype),)


def _window_counts(h: int, w: int, kernel: int) -> np.ndarray:
    rows = np.minimum(kernel, h - np.arange(0, h, kernel))
    cols = np.minimum(kernel, w - np.arange(0, w, kernel))
    return np.outer(rows, cols).astype(np.float64)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Average-pool the last two axes with an edge-truncated window.

    Output extent is ``ceil(H / kernel) x ceil(W / kernel)``; ``kernel == 1``
    returns a bitwise copy.
    """
    if kernel < 1:
        raise ValueError(f"pooling kernel must be >= 1, got {kernel}")
    if x.ndim < 2:
        raise ValueError(f"avg_pool2d needs at least 2 axes, got {x.shape}")
    if kernel == 1:
        return Reshape.apply(x, shape=x.shape) if x.requires_grad else Tensor._wrap(x.data.copy())
    return AvgPool2d.apply(x, kernel=kernel)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


class BilinearSample(Function):
    """Sample images (B, C, H, W) at coords (B, P, 2) -> (B, C, P).

    Coordinates are (x, y) in pixels and are clamped to the image border;
    the gradient w.r.t. a clamped coordinate is zero.
    """

    def forward(self, img, coords):
        b, c, h, w = img.shape
        p = coords.shape[1]
        x = coords[..., 0]
        y = coords[..., 1]
        xc = np.clip(x, 0, w - 1)
        yc = np.clip(y, 0, h - 1)
        x0 = np.floor(xc).astype(np.int64)
        y0 = np.floor(yc).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        wx = (xc - x0).astype(img.dtype)[:, None, :]
        wy = (yc - y0).astype(img.dtype)[:, None, :]
        # flat index of (batch, channel, pixel) into img.ravel(); shape (B, C, P)
        base = (np.arange(b * c, dtype=np.int64) * (h * w)).reshape(b, c, 1)
        idx = [base + (yy * w + xx)[:, None, :] for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
        flat = img.reshape(-1)
        vals = [flat[i] for i in idx]
        wts = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
        out = vals[0] * wts[0] + vals[1] * wts[1] + vals[2] * wts[2] + vals[3] * wts[3]
        self.meta = (img.shape, idx, wts, wx, wy, vals)
        self.inside = ((x >= 0) & (x <= w - 1)).astype(img.dtype), ((y >= 0) & (y <= h - 1)).astype(img.dtype)
        return out

    def backward(self, g):
        shape, idx, wts, wx, wy, vals = self.meta
        gimg = gcoords = None
        if self.needs_grad[0]:
            flat_idx = np.concatenate([i.reshape(-1) for i in idx])
            contrib = np.concatenate([(g * wt).reshape(-1) for wt in wts])
            total = np.bincount(flat_idx, weights=contrib, minlength=int(np.prod(shape)))
            gimg = total.reshape(shape).astype(g.dtype)
        if self.needs_grad[1]:
            v00, v01, v10, v11 = vals
            dx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
            dy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
            gx = np.sum(g * dx, axis=1) * self.inside[0]
            gy = np.sum(g * dy, axis=1) * self.inside[1]
            gcoords = np.stack([gx, gy], axis=-1).astype(g.dtype)
        return gimg, gcoords


def bilinear_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Bilinear interpolation with border clamping.

    Unbatched form: ``img`` (C, H, W), ``coords`` (H', W', 2) -> (C, H', W').
    Batched form: ``img`` (B, C, H, W), ``coords`` (B, P, 2) -> (B, C, P).
    """
    if img.ndim == 3:
        if coords.ndim != 3 or coords.shape[-1] != 2:
            raise ValueError(f"coords must be (H', W', 2), got {coords.shape}")
        hq, wq = coords.shape[:2]
        out = BilinearSample.apply(img.reshape(1, *img.shape), coords.reshape(1, hq * wq, 2))
        return out.reshape(img.shape[0], hq, wq)
    if img.ndim != 4 or coords.ndim != 3 or coords.shape[0] != img.shape[0] or coords.shape[-1] != 2:
        raise ValueError(f"batched bilinear_sample needs (B,C,H,W) and (B,P,2), got {img.shape}, {coords.shape}")
    return BilinearSample.apply(img, coords)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_err: float
    probe_count: int

    def passed(self, threshold: float = 1e-3) -> bool:
        return self.max_rel_err < threshold


@dataclass
class GradCheckCase:
    """A registered differentiable function and a sampler for its inputs."""

    fn: Callable[..., Tensor]
    sample: Callable[[np.random.Generator], tuple[np.ndarray, ...]]
    threshold: float = 1e-3
    epsilon: float = 1e-3


GRADCHECK_REGISTRY: dict[str, GradCheckCase] = {}


def register_gradcheck(name: str, sample, threshold: float = 1e-3, epsilon: float = 1e-3):
    """Decorator: register ``fn(*tensors) -> Tensor`` for :func:`grad_check`."""

    def deco(fn):
        GRADCHECK_REGISTRY[name] = GradCheckCase(fn, sample, threshold, epsilon)
        return fn

    return deco


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-3,
    probes: int = 8,
    seed: int = 0,
    name: str = "<fn>",
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    The scalar under test is ``sum(R * fn(inputs))`` for a fixed random
    ``R``. Each probe draws a random unit direction over all inputs and compares
    the directional derivative from backward() with
    ``(f(x + eps*d) - f(x - eps*d)) / (2*eps)``; relative error uses the
    denominator ``max(|a|, |b|, 1e-6)``. Everything runs in float64.
    """
    rng = np.random.default_rng(seed)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    out = fn(*ts)
    weights = rng.standard_normal(out.shape)
    loss = (out * Tensor(weights, dtype=np.float64)).sum()
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def f(arrays):
        with no_grad():
            y = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data
        return float(np.sum(y * weights))

    worst = 0.0
    for _ in range(probes):
        dirs = [rng.standard_normal(x.shape) for x in xs]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        plus = f([x + epsilon * d for x, d in zip(xs, dirs)])
        minus = f([x - epsilon * d for x, d in zip(xs, dirs)])
        numeric = (plus - minus) / (2 * epsilon)
        analytic = float(sum(np.sum(g * d) for g, d in zip(grads, dirs)))
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    return GradCheckReport(name, worst, probes)


def grad_check(op_name: str, sample_input=None, epsilon: float | None = None, probes: int = 8, seed: int = 0) -> GradCheckReport:
    """Run the finite-difference check for a registered op."""
    if op_name not in GRADCHECK_REGISTRY:
        raise KeyError(f"unknown op {op_name!r}; registered: {sorted(GRADCHECK_REGISTRY)}")
    case = GRADCHECK_REGISTRY[op_name]
    if sample_input is None:
        sample_input = case.sample(np.random.default_rng(seed))
    eps = case.epsilon if epsilon is None else epsilon
    return check_gradients(case.fn, sample_input, eps, probes, seed, op_name)


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _coords_off_lattice(rng, b, p, h, w):
    # keep fractional parts clear of the kinks at integer positions and borders
    x = rng.integers(-1, w, size=(b, p)) + rng.uniform(0.1, 0.9, size=(b, p))
    y = rng.integers(-1, h, size=(b, p)) + rng.uniform(0.1, 0.9, size=(b, p))
    x[x < 0] -= 0.5
    y[y < 0] -= 0.5
    return np.stack([x, y], axis=-1)


register_gradcheck("add", lambda r: (_u(r, 3, 4), _u(r, 4)))(lambda a, b: a + b)
register_gradcheck("sub", lambda r: (_u(r, 3, 4), _u(r, 3, 1)))(lambda a, b: a - b)
register_gradcheck("mul", lambda r: (_u(r, 3, 4), _u(r, 3, 4)))(lambda a, b: a * b)
register_gradcheck("div", lambda r: (_u(r, 3, 4), _u(r, 3, 4, lo=0.5, hi=2.0)))(lambda a, b: a / b)
register_gradcheck("scale2", lambda r: (_u(r, 5),))(lambda a: a * 2.0)
register_gradcheck("sum_axis", lambda r: (_u(r, 3, 4, 5),))(lambda a: a.sum(axis=1))
register_gradcheck("mean_axis", lambda r: (_u(r, 3, 4, 5),))(lambda a: a.mean(axis=(0, 2)))
register_gradcheck("reshape_permute", lambda r: (_u(r, 2, 3, 4),))(lambda a: a.permute(2, 0, 1).reshape(4, 6))
register_gradcheck("index", lambda r: (_u(r, 4, 5),))(lambda a: a[1:3, ::2])
register_gradcheck("concat", lambda r: (_u(r, 2, 3), _u(r, 2, 2)))(lambda a, b: concat([a, b], axis=1))
register_gradcheck("stack", lambda r: (_u(r, 2, 3), _u(r, 2, 3)))(lambda a, b: stack([a, b], axis=1))
register_gradcheck("tanh", lambda r: (_u(r, 3, 5),))(tanh)
register_gradcheck("sigmoid", lambda r: (_u(r, 3, 5),))(sigmoid)
register_gradcheck("elu", lambda r: (_u(r, 3, 5),))(elu)
register_gradcheck("softplus", lambda r: (_u(r, 3, 5),))(softplus)
register_gradcheck("exp", lambda r: (_u(r, 3, 5),))(exp)
register_gradcheck("softmax_lastdim", lambda r: (_u(r, 3, 7),))(softmax_lastdim)
register_gradcheck("matmul", lambda r: (_u(r, 5, 7), _u(r, 7, 3)))(matmul)
register_gradcheck("matmul_batched", lambda r: (_u(r, 2, 4, 6), _u(r, 2, 6, 3)))(matmul)
register_gradcheck("conv2d_1x1", lambda r: (_u(r, 1, 4, 5, 5), _u(r, 3, 4, 1, 1), _u(r, 3)))(
    lambda x, w, b: conv2d(x, w, b)
)
register_gradcheck("conv2d_3x3", lambda r: (_u(r, 2, 3, 6, 6), _u(r, 4, 3, 3, 3), _u(r, 4)))(
    lambda x, w, b: conv2d(x, w, b, padding=1)
)
register_gradcheck("conv2d_3x3_stride2", lambda r: (_u(r, 1, 3, 7, 8), _u(r, 2, 3, 3, 3), _u(r, 2)))(
    lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)
)
register_gradcheck("avg_pool2d_k2", lambda r: (_u(r, 2, 5, 6),))(lambda a: avg_pool2d(a, 2))
register_gradcheck("avg_pool2d_k4", lambda r: (_u(r, 3, 8, 7),))(lambda a: avg_pool2d(a, 4))
register_gradcheck(
    "bilinear_sample",
    lambda r: (_u(r, 2, 3, 5, 6), _coords_off_lattice(r, 2, 9, 5, 6)),
)(bilinear_sample)


__all__ = [
    "Tensor",
    "Function",
    "GradCheckReport",
    "GRADCHECK_REGISTRY",
    "avg_pool2d",
    "bilinear_sample",
    "check_gradients",
    "concat",
    "conv2d",
    "elu",
    "exp",
    "grad_check",
    "matmul",
    "no_grad",
    "register_gradcheck",
    "sigmoid",
    "softmax_lastdim",
    "softplus",
    "stack",
    "tanh",
    "tensor",
    "zeros",
]

