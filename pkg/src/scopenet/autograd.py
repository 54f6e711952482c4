"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` computing the value from raw arrays and a ``backward`` mapping the
upstream gradient to one gradient per input. :func:`backward` walks the graph
in reverse topological order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64
LN2 = float(np.log(2.0))


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape, zero-initialised. Gradients accumulate across calls to
    :func:`backward`; call :meth:`zero_grad` between optimisation steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_ctx")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._ctx: tuple[type[Function], Context, tuple[Tensor, ...]] | None = None

    # --- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def pow2(self):
        return Pow2.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def log_sigmoid(self):
        return LogSigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=-1, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def softmax(self, axis=-1):
        return Softmax.apply(self, axis=axis)

    def log_softmax(self, axis=-1):
        return LogSoftmax.apply(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def clamp_min(self, lo: float):
        return ClampMin.apply(self, lo=lo)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Context:
    """Scratch space a Function uses to pass values from forward to backward."""

    def __init__(self) -> None:
        self.saved: tuple = ()
        self.kw: dict[str, Any] = {}

    def save(self, *values) -> None:
        self.saved = values


OPS: dict[str, type["Function"]] = {}


class Function:
    name = "function"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        OPS[cls.name] = cls

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **kw) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kw) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.kw = kw
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kw))
        if _grad_enabled and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = (cls, ctx, tensors)
        return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands with shapes {a.shape} and {b.shape} do not broadcast") from None


def _require_finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op}: produced non-finite values")
    return out


# --- elementwise binary -----------------------------------------------------


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("add", a, b)
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("sub", a, b)
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("mul", a, b)
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("div", a, b)
        if np.any(b == 0):
            raise DomainError("div: division by zero")
        ctx.save(a, b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)


class Minimum(Function):
    """Elementwise minimum; on ties the gradient goes to the first operand."""

    name = "minimum"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("minimum", a, b)
        mask = a <= b
        ctx.save(a.shape, b.shape, mask)
        return np.where(mask, a, b)

    @staticmethod
    def backward(ctx, g):
        sa, sb, mask = ctx.saved
        return unbroadcast(np.where(mask, g, 0.0), sa), unbroadcast(np.where(mask, 0.0, g), sb)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


# --- elementwise unary ------------------------------------------------------


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        with np.errstate(over="ignore"):
            out = _require_finite("exp", np.exp(a))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError("log: argument must be strictly positive")
        ctx.save(a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g / a,)


class Pow2(Function):
    """``2 ** a``, the anchor-scale transform."""

    name = "pow2"

    @staticmethod
    def forward(ctx, a):
        with np.errstate(over="ignore"):
            out = _require_finite("pow2", np.exp2(a))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out * LN2,)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        # split by sign so neither branch overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out * (1.0 - out),)


class LogSigmoid(Function):
    """``log(sigmoid(a))`` evaluated as ``-softplus(-a)``."""

    name = "log_sigmoid"

    @staticmethod
    def forward(ctx, a):
        out = np.minimum(a, 0.0) - np.log1p(np.exp(-np.abs(a)))
        ctx.save(a)
        return out

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        # d/da log sigmoid(a) = sigmoid(-a)
        e = np.exp(-np.abs(a))
        s_neg = np.where(a >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        return (g * s_neg,)


class Relu(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask)
        return a * mask

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


class ClampMin(Function):
    """``max(a, lo)`` with zero gradient where the clamp is active."""

    name = "clamp_min"

    @staticmethod
    def forward(ctx, a, lo):
        mask = a >= lo
        ctx.save(mask)
        return np.where(mask, a, lo)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


# --- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, _norm_axis(axis, a.ndim))
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axes = ctx.saved
        if not ctx.kw.get("keepdims"):
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        if a.size == 0:
            raise ShapeError("mean: empty input")
        ctx.save(a.shape, axes)
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axes = ctx.saved
        count = int(np.prod([shape[i] for i in axes]))
        if not ctx.kw.get("keepdims"):
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)


class Max(Function):
    """Maximum along one axis; the gradient goes to the first maximal entry."""

    name = "max"

    @staticmethod
    def forward(ctx, a, axis=-1, keepdims=False):
        axis = axis % a.ndim
        idx = np.argmax(a, axis=axis)
        ctx.save(a.shape, axis, idx)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
        return out if keepdims else np.squeeze(out, axis=axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis, idx = ctx.saved
        if not ctx.kw.get("keepdims"):
            g = np.expand_dims(g, axis)
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
        return (out,)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx.saved
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx.saved
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


# --- shape manipulation -----------------------------------------------------


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(a.shape)
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return (g.reshape(shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(axes)
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        (axes,) = ctx.saved
        return (np.transpose(g, np.argsort(axes)),)


class GetItem(Function):
    """Basic and advanced indexing; repeated indices accumulate on backward."""

    name = "getitem"

    @staticmethod
    def forward(ctx, a, index):
        ctx.save(a.shape, a.dtype)
        try:
            return np.asarray(a[index])
        except IndexError as exc:
            raise ShapeError(f"getitem: {exc}") from None

    @staticmethod
    def backward(ctx, g):
        shape, dtype = ctx.saved
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ctx.kw["index"], g)
        return (out,)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from None
        ctx.save(np.cumsum([a.shape[axis] for a in arrays])[:-1], axis)
        return out

    @staticmethod
    def backward(ctx, g):
        splits, axis = ctx.saved
        return tuple(np.split(g, splits, axis=axis))


# --- convolution ------------------------------------------------------------


class Conv2d(Function):
    """Cross-correlation of NCHW input with OIHW weights via strided windows."""

    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if xp.shape[2] < k or xp.shape[3] < k:
            raise ShapeError(f"conv2d: padded input {xp.shape[2:]} smaller than kernel {k}")
        win = sliding_window_view(xp, (k, w.shape[3]), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        ctx.save(x.shape, xp.shape, win, w)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        x_shape, xp_shape, win, w = ctx.saved
        stride, padding = ctx.kw.get("stride", 1), ctx.kw.get("padding", 0)
        kh, kw = w.shape[2], w.shape[3]
        ho, wo = g.shape[2], g.shape[3]
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        cols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return gxp, gw, gb


# --- functional helpers -----------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def minimum(a, b) -> Tensor:
    return Minimum.apply(a, b)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


# --- backward pass ----------------------------------------------------------


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
        if node._ctx is not None:
            for parent in reversed(node._ctx[2]):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        fn, ctx, parents = node._ctx
        for parent, pg in zip(parents, fn.backward(ctx, g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.1) -> Iterator[None]:
    """Scale the derivative rule of primitive ``op`` by ``factor``.

    Negative-control hook for gradient checking; never use outside tests.
    """
    cls = OPS[op]
    original = cls.__dict__["backward"]

    def corrupted(ctx, g):
        return tuple(None if x is None else x * factor for x in original.__func__(ctx, g))

    cls.backward = staticmethod(corrupted)
    try:
        yield
    finally:
        cls.backward = original
