"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    reference: tuple[Callable[..., Tensor], Sequence[Tensor]] | None = None,
) -> float:
    """Compare backprop gradients of scalar ``fn(*inputs)`` with central differences.

    Only inputs with ``requires_grad`` are perturbed. With ``max_coords`` set,
    that many coordinates per input are sampled instead of visiting all of
    them. Returns ``max |analytic - numeric| / max(1, |analytic|)``.

    ``fn`` must be deterministic: anything random inside it (dropout masks)
    has to be re-seeded on every call.

    ``reference = (ref_fn, ref_inputs)`` takes the differences on a separate,
    typically float64, copy of the same function and point. This checks a
    float32 backward pass without float32 rounding swamping the numeric
    slope.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [None if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    rng = rng or np.random.default_rng(0)

    num_fn, num_inputs = reference if reference is not None else (fn, inputs)
    if len(num_inputs) != len(inputs):
        raise ValueError("reference inputs must mirror the checked inputs")
    worst = 0.0
    for t, grad in zip(num_inputs, analytic):
        if not t.requires_grad:
            continue
        if grad is None:
            grad = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i].copy()
            flat[i] = orig + epsilon
            f_plus = float(num_fn(*num_inputs).data)
            flat[i] = orig - epsilon
            f_minus = float(num_fn(*num_inputs).data)
            flat[i] = orig
            # the step actually taken after rounding to the tensor dtype
            h = (np.float64(flat.dtype.type(orig + epsilon)) - np.float64(flat.dtype.type(orig - epsilon)))
            numeric = (f_plus - f_minus) / h
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for t in inputs:
        t.grad = None
    return worst
