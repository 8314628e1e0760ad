"""Dense layer primitives, losses and the Adam optimizer.

Everything operates on float64 numpy arrays. Backward functions take the
forward inputs explicitly so there is no hidden state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DivergenceError(FloatingPointError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape != (W.shape[1],):
        raise DimensionError(f"bias {b.shape} does not match weight {W.shape}")
    return matmul(x, W) + b


def dense_backward(x: np.ndarray, W: np.ndarray, upstream: np.ndarray):
    """Return (dW, db, dx) for ``y = xW + b``."""
    if upstream.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(f"upstream {upstream.shape} does not match output "
                             f"({x.shape[0]}, {W.shape[1]})")
    return x.T @ upstream, upstream.sum(axis=0), upstream @ W.T


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(as_tensor(x) > 0.0, upstream, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross entropy of ``softmax(logits)`` against integer labels.

    Returns the loss and its gradient with respect to the logits,
    ``(softmax - onehot) / n``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n < 1:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, "
                             f"{len(state.m)} moment buffers")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape} vs state {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def finite_difference_check(loss_fn: Callable[[list[np.ndarray]], float],
                            params: Sequence[np.ndarray],
                            analytic: Sequence[np.ndarray],
                            h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    The denominator per coordinate is ``max(|a|, |b|, 1e-12)``.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    params = [as_tensor(p).copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs gradient {g.shape}")
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss at coordinate {i}")
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]), 1e-12)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
