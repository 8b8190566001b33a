"""Momentum SGD with coupled L2 weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .params import ParamSet


def sgd_momentum_step(params: ParamSet, velocity: dict[str, np.ndarray], lr: float,
                      momentum: float, weight_decay: float) -> None:
    """In place: ``v = momentum*v + grad + wd*p``; ``p -= lr*v``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad + p.data.dtype.type(weight_decay) * p.data
        v = velocity.get(name)
        v = g if v is None else p.data.dtype.type(momentum) * v + g
        velocity[name] = v
        p.data = p.data - p.data.dtype.type(lr) * v


class MomentumSGD:
    def __init__(self, params: ParamSet, schedule: Sequence[tuple[int, float]],
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.schedule = list(schedule)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def lr_at(self, iteration: int) -> float:
        """Piecewise-constant rate; ``schedule`` lists (iterations, lr) segments in order."""
        end = 0
        for n, lr in self.schedule:
            end += n
            if iteration < end:
                return lr
        return self.schedule[-1][1]

    def step(self, iteration: int) -> float:
        lr = self.lr_at(iteration)
        sgd_momentum_step(self.params, self.velocity, lr, self.momentum, self.weight_decay)
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
