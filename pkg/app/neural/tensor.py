"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` produced by an operation keeps its parents and a closure that
maps the gradient of the output to gradients of the parents. ``backward``
walks the graph in reverse topological order. Gradients are accumulated
only on leaves that require them (``Parameter`` objects).

Every tensor carries a version counter that in-place updates bump. A node
remembers the versions of its parents when it is created, and ``backward``
refuses to run through a node whose parent has changed since.
"""
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DomainError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:

    def __init__(self, data, parents: Iterable['Tensor'] = (), backward: Optional[BackwardFn] = None,
                 op: str = '', requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._version = 0
        self._parents = tuple(parents)
        self._parent_versions = tuple(p._version for p in self._parents)
        self._backward = backward
        self._released = False
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    def __repr__(self):
        label = f", op={self.op}" if self.op else ''
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def version(self) -> int:
        return self._version

    def bump_version(self):
        self._version += 1

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # operator sugar; each returns a new node
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def _topological_order(self):
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise UsageError("backward called on a tensor that does not depend on any parameter")
        if grad is None:
            if self.size != 1:
                raise UsageError(f"backward on a tensor of shape {self.shape} needs an explicit gradient")
            grad = np.ones_like(self.data)
        order = self._topological_order()
        for node in order:
            if node._released:
                raise UsageError(f"graph through {node.op or 'tensor'} was already differentiated")
            for parent, seen_version in zip(node._parents, node._parent_versions):
                if parent._version != seen_version:
                    raise UsageError(
                        f"{getattr(parent, 'name', parent.op or 'tensor')} was modified after "
                        f"the graph through {node.op} was built"
                    )

        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node._accumulate(g)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
            node._released = True
            node._backward = None


class Parameter(Tensor):
    """A named learnable leaf."""

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DomainError(f"{self.name}: cannot assign shape {values.shape} to {self.data.shape}")
        self.data[...] = values
        self.bump_version()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), backward, 'add')


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,), 'neg')


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), backward, 'mul')


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of two 2-d tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), backward, 'matmul')


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, 'sum')


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DomainError("concat needs at least one tensor")
    edges = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')
