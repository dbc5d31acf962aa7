"""Plain stochastic gradient descent."""

from __future__ import annotations

from typing import Iterable, Sequence

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """A parameter handed to the optimizer has no gradient."""


def sgd_step(params: Iterable[Tensor], learning_rate: float, names: Sequence[str] | None = None) -> None:
    """In-place ``p -= lr * p.grad`` for every parameter, then clear gradients.

    All gradients are checked before anything is modified.
    """
    if learning_rate <= 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            label = names[i] if names is not None else f"#{i} {p!r}"
            raise MissingGradientError(f"parameter {label} has no gradient")
    for p in params:
        p.data -= p.data.dtype.type(learning_rate) * p.grad
        p.grad = None


class SGD:
    """Stateless SGD over a fixed, named parameter group."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params.values(), self.learning_rate, names=list(self.params))
        self.steps += 1
