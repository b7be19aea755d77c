"""Gradient-norm clipping and the two optimizers used for training."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped_grads, norm_before_clipping)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradient(f"gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= self.lr * g


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
