"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations eagerly build a tape of `Tensor` nodes; calling ``backward()`` on a
scalar walks the tape in reverse topological order and accumulates gradients
into every reachable node. Leaves that carry trainable state are `Parameter`
instances, which keep a persistent ``grad`` buffer between steps.

All math is float64. Graph construction can be suspended with ``no_grad()``
for inference and finite-difference evaluations, in which case operations
return plain constant tensors.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suspend tape construction inside the context."""
    previous = grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = previous


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A dense float64 array plus reverse-mode gradient bookkeeping.

    ``data`` holds the row-major values, ``grad`` (populated by ``backward``)
    the accumulated gradient of the same shape. Non-leaf tensors keep the
    closure that routes their gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if self.data.size == 0:
            raise ShapeError(
                f"tensor dimensions must all be >= 1, got shape {self.data.shape}"
            )
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) to every reachable tensor; self must be scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable leaf; ``grad`` is always allocated and zeroed."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _needs_grad(*tensors: Tensor) -> bool:
    if not grad_enabled():
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(grad)  # own the buffer; grad may be a view
    else:
        t.grad += grad


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and structural operations ------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b)
    out = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a = _coerce(a)
    b = _coerce(b)
    out = a.data - b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = -a.data
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, -g)

    return _node(out, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b)
    out = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _node(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (2.0 * a.data))

    return _node(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * out)

    return _node(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    if not _needs_grad(a):
        return Tensor(out)
    mask = a.data > 0.0

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * mask)

    return _node(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors or two stacked (batched) 3-d tensors."""
    a = _coerce(a)
    b = _coerce(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul expects two 2-d or two 3-d tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} by {b.shape}")
    out = a.data @ b.data
    if not _needs_grad(a, b):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _node(out, (a, b), backward)


def transpose(a: Tensor, *axes: int) -> Tensor:
    axes_t = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, axes_t)
    if not _needs_grad(a):
        return Tensor(out)
    inverse = [0] * len(axes_t)
    for position, axis in enumerate(axes_t):
        inverse[axis] = position
    inverse = tuple(inverse)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _node(out, (a,), backward)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    if not _needs_grad(a):
        return Tensor(out)
    original = a.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(original))

    return _node(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return Tensor(out)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(t, g[tuple(index)])

    return _node(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors of equal shape along a new leading axis (axis 0 only)."""
    if axis != 0:
        raise ShapeError("stack supports axis=0 only")
    tensors = [_coerce(t) for t in tensors]
    out = np.stack([t.data for t in tensors])
    if not _needs_grad(*tensors):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            _accumulate(t, g[i])

    return _node(out, tuple(tensors), backward)


def select(a: Tensor, index: int) -> Tensor:
    """The ``index``-th slab along axis 0 (the axis is dropped)."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"index {index} outside axis of length {a.shape[0]}")
    out = a.data[index].copy()
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _node(out, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return Tensor(out)
    shape = a.shape

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape).copy())

    return _node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(a: Tensor, axis: int = 0) -> Tensor:
    out = np.cumsum(a.data, axis=axis)
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        # d(cumsum)/dx is a reversed cumulative sum along the same axis.
        flipped = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accumulate(a, flipped)

    return _node(out, (a,), backward)


def mean_scalars(terms: Iterable[Tensor]) -> Tensor:
    """Mean of a list of scalar tensors (arithmetic on the tape)."""
    terms = list(terms)
    if not terms:
        raise ShapeError("mean_scalars requires at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(terms))


# -- fused neural-network primitives -------------------------------------


def softmax_last(a: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _needs_grad(a):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _node(out, (a,), backward)


def softmax_rows(a: Tensor | np.ndarray) -> Tensor:
    """Row-wise softmax of a 2-d tensor; rows are stabilized by max subtraction."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise ShapeError("softmax_rows requires finite inputs")
    return softmax_last(a)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis to zero mean / unit variance,
    then apply the affine map ``gamma * x + beta``."""
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine parameters must have shape ({dim},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    out = normalized * gamma.data + beta.data
    if not _needs_grad(a, gamma, beta):
        return Tensor(out)

    def backward(g: np.ndarray) -> None:
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(beta, g.sum(axis=reduce_axes))
        _accumulate(gamma, (g * normalized).sum(axis=reduce_axes))
        gn = g * gamma.data
        term = gn - gn.mean(axis=-1, keepdims=True)
        term -= normalized * (gn * normalized).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv_std)

    return _node(out, (a, gamma, beta), backward)


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Xavier/Glorot-uniform initial values for a (fan_in, fan_out) weight."""
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
