"""Adam and AdamW with an optional cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeMismatch


class Adam:
    """Bias-corrected Adam; ``decoupled=True`` gives AdamW.

    Without decoupling, ``weight_decay`` is added to the gradient (L2).
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = list(params)
        self.lr = self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    @property
    def kind(self) -> str:
        return "adamw" if self.decoupled else "adam"

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update


def AdamW(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01) -> Adam:
    return Adam(params, lr, betas, eps, weight_decay, decoupled=True)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Half-cosine decay from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 0:
        return base
    frac = min(step, total) / total
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * frac))
