"""Binary cross-entropy and the Adam optimizer."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter, ShapeError, Tensor

PROB_EPS = 1e-7


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is nan/inf; training cannot continue."""


def bce_loss(prob: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """-mean(y ln p + (1 - y) ln(1 - p)) with p clamped to [eps, 1 - eps].

    Clamped pixels contribute no gradient.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != prob.shape:
        raise ShapeError(f"bce_loss: prediction {prob.shape} and target {y.shape} differ")
    dt = prob.dtype.type
    y = y.astype(prob.dtype)
    p = np.clip(prob.data, dt(eps), dt(1.0 - eps))
    n = p.size
    value = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    inside = (prob.data >= dt(eps)) & (prob.data <= dt(1.0 - eps))

    def _bw(g):
        return (g * inside * (p - y) / (p * (1 - p)) / dt(n),)

    return Tensor._from_op(np.asarray(value, dtype=prob.dtype), (prob,), _bw, "bce_loss")


class Adam:
    """Adaptive moment estimation with bias correction and a constant step size."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.count_nonzero(~np.isfinite(p.grad)))
                raise NonFiniteError(
                    f"non-finite gradient in parameter {p.name or i} ({bad} of {p.grad.size} entries), step {self.t + 1}")
        self.t += 1
        dt = self.params[0].dtype.type if self.params else np.float64
        b1, b2 = dt(self.beta1), dt(self.beta2)
        c1 = dt(1.0 - self.beta1 ** self.t)
        c2 = dt(1.0 - self.beta2 ** self.t)
        lr, eps = dt(self.lr), dt(self.eps)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
