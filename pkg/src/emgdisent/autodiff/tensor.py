"""Tensor type and reverse-mode graph traversal."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype) -> np.ndarray:
    # numpy scalars (e.g. the sum of two 0-d arrays) keep their precision too
    if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return np.asarray(data)
        return np.asarray(data, dtype=DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """An n-dimensional array that records how it was computed.

    ``data`` holds float32 values by default; float64 tensors are supported so
    gradient checks can run with tighter tolerances. Non-leaf tensors keep a
    reference to their parents and a closure that pushes a gradient back
    into them. The closure takes the gradient as an argument rather than
    capturing the output tensor, so finished graphs hold no reference cycles
    and are freed as soon as they go out of scope.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def accumulate(self, g: np.ndarray) -> None:
        """Add ``g`` into this tensor's gradient buffer."""
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def graph(self) -> list["Tensor"]:
        """Return every tensor this one depends on, in topological order."""
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
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> list["Tensor"]:
        """Backpropagate from this tensor.

        A scalar output seeds with 1. Returns the nodes in the order their
        backward rules ran (reverse topological order).
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.data.shape}")
        order = self.graph()
        # interior nodes start clean so repeated calls don't double count
        for node in order:
            if node._parents:
                node.grad = None
        if self._parents:
            self.grad = grad.copy()
        else:
            self.accumulate(grad)
        visited = []
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            visited.append(node)
        return visited

    # A few elementwise helpers, enough to write small test objectives.
    # No broadcasting beyond Python scalars.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -other)

    def sum(self) -> "Tensor":
        return total(self)


def _needs_grad(tensors: Iterable[Tensor]) -> bool:
    return any(t.requires_grad for t in tensors)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op's output, wiring ``backward`` only if some parent needs it."""
    if _needs_grad(parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_result(a.data + a.data.dtype.type(b), (a,), lambda g: a.accumulate(g), "add")
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return make_result(a.data * c, (a,), lambda g: a.accumulate(g * c), "mul")
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def total(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape))

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")
