"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.06):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            # scalars and 1-d parameters (norm affine, gates, biases) are not decayed
            if self.weight_decay and p.data.ndim > 1:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"].reshape(-1)[0])
        for i in range(len(self.params)):
            self.m[i] = state[f"m.{i}"].astype(self.params[i].dtype).reshape(self.params[i].shape)
            self.v[i] = state[f"v.{i}"].astype(self.params[i].dtype).reshape(self.params[i].shape)


def cosine_lr(epoch: int, epochs: int, base_lr: float, min_lr: float, warmup: int) -> float:
    """Linear warmup for ``warmup`` epochs, then cosine decay to ``min_lr``."""
    if warmup > 0 and epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    span = max(epochs - warmup, 1)
    progress = min(max(epoch - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
