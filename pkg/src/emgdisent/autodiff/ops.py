"""Differentiable ops used by the dual-branch network.

Sequence tensors are laid out time-major: ``(L, C)`` for a single window or
``(N, L, C)`` for a batch. Every op accepts either form where that makes sense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 2:
        return x.data[None], True
    if x.data.ndim == 3:
        return x.data, False
    raise DimensionError(f"expected (L, C) or (N, L, C), got {x.shape}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 1-D convolution (cross-correlation) with zero padding.

    ``weight`` is ``(Cout, Cin, K)``; the output length is ``L + 2*padding - K + 1``.
    """
    xb, single = _batched(x)
    n, length, cin = xb.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv1d: weight expects {wcin} input channels, input has {cin}")
    if k % 2 != 1:
        raise DimensionError(f"conv1d: kernel size must be odd, got {k}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    if padding < 0 or length + 2 * padding < k:
        raise DimensionError(f"conv1d: length {length} with padding {padding} too short for kernel {k}")

    xp = np.pad(xb, ((0, 0), (padding, padding), (0, 0))) if padding else xb
    out_len = length + 2 * padding - k + 1
    # (N, L', Cin, K) view -> (N*L', Cin*K) matrix; matches weight's (Cin, K) flattening
    cols = sliding_window_view(xp, k, axis=1).reshape(n * out_len, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out = (cols @ wmat.T).reshape(n, out_len, cout)
    out += bias.data

    def backward(g):
        g2 = g.reshape(n * out_len, cout)
        if weight.requires_grad:
            weight.accumulate((g2.T @ cols).reshape(cout, cin, k))
        if bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, out_len, cin, k)
            dxp = np.zeros((n, length + 2 * padding, cin), dtype=g.dtype)
            for j in range(k):
                dxp[:, j:j + out_len, :] += dcols[..., j]
            dx = dxp[:, padding:padding + length, :]
            x.accumulate(dx[0] if single else dx)

    return make_result(out[0] if single else out, (x, weight, bias), backward, "conv1d")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    updates: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize each channel (last axis) over all leading axes.

    Works for ``(N, L, C)`` sequence features and ``(N, F)`` dense features.
    Train mode uses batch statistics and updates ``state`` in place; the
    running variance uses the unbiased estimate.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta must be ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    m = x.data.size // c
    dt = x.data.dtype

    if mode == "train":
        if m < 2:
            raise DimensionError("batchnorm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dt)
        xhat = centered * inv_std
        mom = state.momentum
        state.mean = ((1 - mom) * state.mean + mom * mu).astype(state.mean.dtype)
        state.var = ((1 - mom) * state.var + mom * var * (m / (m - 1))).astype(state.var.dtype)
        state.updates += 1
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(state.var + state.eps)).astype(dt)
        xhat = (x.data - state.mean.astype(dt)) * inv_std
    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            if mode == "train":
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                dx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std
            x.accumulate(dx.astype(dt, copy=False))

    return make_result(out, (x, gamma, beta), backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly 0 is 0."""
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0), (x,), lambda g: x.accumulate(g * mask), "relu")


def maxpool1d(x: Tensor, pool: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling along time. Trailing samples that don't
    fill a window are dropped. Ties send the gradient to the first index."""
    if pool != stride:
        raise NotImplementedError("maxpool1d supports pool == stride only")
    xb, single = _batched(x)
    n, length, c = xb.shape
    if length < pool:
        raise DimensionError(f"maxpool1d: length {length} < pool {pool}")
    out_len = length // pool
    span = out_len * pool
    # running max over strided slices; strict ">" keeps the first index on ties
    out = xb[:, 0:span:pool, :].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, pool):
        cand = xb[:, j:span:pool, :]
        better = cand > out
        np.copyto(out, cand, where=better)
        np.copyto(idx, j, where=better)

    def backward(g):
        gb = g[None] if single else g
        dx = np.zeros_like(xb)
        for j in range(pool):
            dx[:, j:span:pool, :] = gb * (idx == j)
        x.accumulate(dx[0] if single else dx)

    return make_result(out[0] if single else out, (x,), backward, "maxpool1d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, F)`` and ``weight`` ``(O, F)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[1]} != weight features {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))

    return make_result(out, (x, weight, bias), backward, "linear")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: x.accumulate(g.reshape(x.shape)), "reshape")


def flatten(x: Tensor) -> Tensor:
    """(N, L, C) -> (N, L*C), position-major."""
    return reshape(x, (x.shape[0], -1))


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return make_result(x.data, (x,), lambda g: x.accumulate(g), "dropout")
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: x.accumulate(g * scale), "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "sum") -> tuple[Tensor, np.ndarray]:
    """Cross-entropy of softmax(logits) against one-hot ``targets``.

    Returns ``(loss, probabilities)``. ``reduction="sum"`` gives
    ``-sum_i y_i . log(p_i)`` over the batch; ``"mean"`` divides by N.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise DimensionError(f"cross-entropy: logits {logits.shape} vs targets {y.shape}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    y = y.astype(z.dtype, copy=False)
    loss = -(y * log_probs).sum()
    n = z.shape[0]
    if reduction == "mean":
        loss = loss / n
    # clamp -0.0 from a perfect prediction
    loss = np.asarray(max(loss, 0.0), dtype=z.dtype)

    def backward(g):
        scale = g / n if reduction == "mean" else g
        logits.accumulate(((probs - y) * scale).astype(z.dtype, copy=False))

    return make_result(loss, (logits,), backward, "softmax_cross_entropy"), probs


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    factor = x.data.dtype.type(-lam)
    return make_result(x.data, (x,), lambda g: x.accumulate(g * factor), "gradient_reversal")


def scale_gradient(x: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the gradient by ``factor`` on the way back."""
    f = x.data.dtype.type(factor)
    return make_result(x.data, (x,), lambda g: x.accumulate(g * f), "scale_gradient")
