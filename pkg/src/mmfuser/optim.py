"""Plain optimizers over Param lists. Single trainer thread per model."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Param

__all__ = ["Adam", "SgdMomentum", "cosine_lr", "make_optimizer"]


class Adam:
    def __init__(self, params: list[Param], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.value.shape) for p in params]
        self.v = [np.zeros(p.value.shape) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(p.value.data - lr * update)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SgdMomentum:
    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros(p.value.shape) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            self.buf[i] = self.momentum * self.buf[i] + p.grad
            p.assign(p.value.data - lr * self.buf[i])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from base to 0 over `total` steps."""
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_optimizer(kind: str, params: list[Param], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgdm":
        return SgdMomentum(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
