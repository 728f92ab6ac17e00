"""AdamW with decoupled weight decay and global-norm gradient clipping."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, clip_norm: float | None = 1.0,
                 lr_overrides: dict[str, float] | None = None):
        """``lr_overrides`` maps a parameter-name prefix to its own learning rate."""
        self.params = dict(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip_norm = weight_decay, clip_norm
        self.lr_overrides = lr_overrides or {}
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = self.grad_norm()
        clip = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            clip = self.clip_norm / (norm + 1e-6)
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * clip if clip != 1.0 else p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self.lr_for(name)
            dtype = p.data.dtype
            p.data *= dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(dtype, copy=False)
        return norm
