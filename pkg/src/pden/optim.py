"""Gradient-descent optimizers over lists of trainable tensors.

Both optimizers update ``p.data`` in place from ``p.grad`` and treat a
``None`` grad as zero (no update), so parameters untouched by a backward
pass are left alone.  State (Adam moments, step counter) lives on the
optimizer instance; given identical parameter values, gradients and state,
``step()`` is deterministic.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class SGD:
    """Plain stochastic gradient descent: p -= lr * grad."""

    def __init__(self, params, lr: float):
        self.params: list[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if any(not p.requires_grad for p in self.params):
            raise ValueError("SGD given a tensor that does not require grad")
        self.lr = float(lr)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction folded into the step size.

    lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t), update
    p -= lr_t * m / (sqrt(v) + eps).  For a single step from zero state the
    update is lr * g / (|g| + eps'), i.e. magnitude ~= lr when |g| >> eps.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if any(not p.requires_grad for p in self.params):
            raise ValueError("Adam given a tensor that does not require grad")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        lr_t = self.lr * np.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr_t * m / (np.sqrt(v) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
