"""AdamW with decoupled weight decay plus the two LR decay schedules."""

from __future__ import annotations

import numpy as np

from .autodiff import Param


class AdamW:
    def __init__(self, params: list[Param], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        return float(np.sqrt(sq))

    def step(self, lr: float | None = None):
        if lr is not None:
            self.lr = lr
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def linear_decay(base_lr: float, step: int, total: int, floor: float = 0.0) -> float:
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return floor + (base_lr - floor) * (1.0 - frac)


def cosine_decay(base_lr: float, step: int, total: int, floor: float = 0.0) -> float:
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))
