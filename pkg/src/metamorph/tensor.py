"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Differentiable operations record their
inputs and a closure mapping the output gradient to input gradients; calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order and accumulates ``.grad`` on every leaf with ``requires_grad=True``.

Training runs in float32. Gradient checks switch to float64 with
:func:`float64_mode`, which changes the dtype of newly created tensors.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision inside the block."""
    global _default_dtype
    previous, _default_dtype = _default_dtype, np.float64
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def check_finite(array: np.ndarray, where: str) -> None:
    if not np.isfinite(array).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf in the graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


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


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor._wrap(np.asarray(value, dtype=dtype))


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


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._wrap(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with NumPy broadcasting (covers scalar scaling)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.data.dtype.type(factor)
    return Tensor._wrap(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._wrap(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part).astype(a.dtype, copy=False)

    def backward(g):
        return (g * np.where(x > 0, 1, neg_part + alpha).astype(a.dtype, copy=False),)

    return Tensor._wrap(out, (a,), backward)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sum_of_squares(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._wrap(np.asarray(np.sum(x * x)), (a,), lambda g: (2 * g * x,))


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is taken as zero."""
    x = a.data
    norm = np.sqrt(np.sum(x * x))

    def backward(g):
        if norm == 0:
            return (np.zeros_like(x),)
        return (g * x / norm,)

    return Tensor._wrap(np.asarray(norm), (a,), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return Tensor._wrap(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._wrap(out, (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._wrap(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._wrap(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    check_finite(out, "matmul")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out
