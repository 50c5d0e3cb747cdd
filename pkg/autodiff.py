import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import NotScalar, ShapeMismatch

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array with an optional reverse-mode gradient"""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (), backward_fn: Optional[BackwardFn] = None,
                 name: str = ""):
        values = np.asarray(values)
        if values.dtype.kind != "f":
            values = values.astype(np.float64)
        self.values = values
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(values: np.ndarray, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def make_op(values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap forward values with the closure that maps the output gradient to parent gradients"""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.values + b.values, (a, b), backward_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product"""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return make_op(a.values * b.values, (a, b), backward_fn)


def scale(a: ArrayLike, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return make_op(a.values * k, (a,), lambda g: (g * k,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product; 1-D operands are promoted as in numpy"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")

    av = a.values[None, :] if a.ndim == 1 else a.values
    bv = b.values[:, None] if b.ndim == 1 else b.values
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(av.shape[:-2], bv.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dimensions differ, shapes {a.shape} and {b.shape}")

    out = av @ bv

    def backward_fn(g):
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = g2[..., None, :]
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = _unbroadcast(g2 @ np.swapaxes(bv, -1, -2), av.shape).reshape(a.shape)
        if b.requires_grad:
            grad_b = _unbroadcast(np.swapaxes(av, -1, -2) @ g2, bv.shape).reshape(b.shape)
        return grad_a, grad_b

    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim != 1 else out[..., 0]
    return make_op(out, (a, b), backward_fn)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return make_op(np.where(mask, a.values, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = expit(a.values)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeMismatch(f"concat along axis {axis}: incompatible shapes {shapes}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return np.split(g, splits, axis=axis)

    return make_op(out, tensors, backward_fn)


def sum_over(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"sum_over: axis {axis} out of range for shape {a.shape}")

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_op(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), backward_fn)


def mean_over(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_over(a, axis), 1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: ArrayLike, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Select entries along an axis; repeated indices accumulate gradient"""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return make_op(np.take(a.values, indices, axis=axis), (a,), backward_fn)


def index(a: ArrayLike, key) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_op(a.values[key], (a,), backward_fn)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into .grad of every tracked tensor reachable from loss"""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on an untracked tensor; nothing to do")
        return

    pending = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=node.dtype)
        else:
            node.grad += g
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad


def finite_difference_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                            h: float = 1e-6, max_entries: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    With max_entries set, that many entries per parameter are sampled instead
    of checking every entry.
    """
    for p in params:
        p.zero_grad()
    backward(f(params))
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for entry in entries:
            original = flat[entry]
            flat[entry] = original + h
            plus = f(params).item()
            flat[entry] = original - h
            minus = f(params).item()
            flat[entry] = original

            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[entry]
            error = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            worst = max(worst, error)

    logger.debug(f"Finite-difference check over {len(params)} parameter(s): max relative error {worst:.3e}")
    return worst
