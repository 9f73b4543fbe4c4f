"""Plain SGD with optional momentum and weight decay."""

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .module import Parameter


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


class SGD:
    """``v <- mu*v + (g + wd*w); w <- w - lr*v`` (plain step when momentum is 0)."""

    def __init__(self, params: Iterable[Parameter], cfg: SgdConfig):
        self.params: List[Parameter] = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self._velocity: List[Optional[np.ndarray]] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for i, p in enumerate(self.params):
            g = p.grad + wd * p.data if wd else p.grad
            if mu:
                v = self._velocity[i]
                v = g.copy() if v is None else mu * v + g
                self._velocity[i] = v
                g = v
            p.data -= self.lr * g


def sgd_step(params, grads, cfg: SgdConfig, velocity=None):
    """Functional SGD step on plain arrays; returns ``(new_params, new_velocity)``."""
    new_params, new_vel = [], []
    for i, (w, g) in enumerate(zip(params, grads)):
        w = np.asarray(w, dtype=np.float64)
        d = np.asarray(g, dtype=np.float64) + cfg.weight_decay * w
        if cfg.momentum:
            prev = None if velocity is None else velocity[i]
            d = d if prev is None else cfg.momentum * prev + d
        new_vel.append(d)
        new_params.append(w - cfg.lr * d)
    return new_params, new_vel


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
