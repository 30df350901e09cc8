"""SGD with momentum, decoupled from the model, and the cosine schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        raise ConfigError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.

    Only parameters with ``requires_grad`` set are touched, so a frozen
    parameter stays bit-identical.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-9):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if momentum < 0 or weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, self.lr if lr is None else lr, self.weight_decay,
                 self.momentum, self.velocity)


def sgd_step(params: Mapping[str, Tensor], lr: float, weight_decay: float, momentum: float,
             velocity: dict[str, np.ndarray] | None = None) -> None:
    # lr == 0 is legal: a cosine schedule reaches it at its end point
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            v = velocity.get(name)
            v = d.copy() if v is None else momentum * v + d
            velocity[name] = v
        else:
            v = d
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
