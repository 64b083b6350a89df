"""Stochastic gradient descent with heavy-ball momentum."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .nn import ParamStore


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None,
             decay_filter: Callable[[str, np.ndarray], bool] | None = None) -> None:
    """Apply ``v <- m*v + g + wd*p; p <- p - lr*v`` to every parameter in name order.

    ``velocity`` persists momentum buffers across calls; ``decay_filter``
    restricts weight decay to the parameters it accepts.
    """
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if weight_decay and (decay_filter is None or decay_filter(name, p.data)):
            g = g + weight_decay * p.data
        if momentum:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
        else:
            v = g
        p.data -= (lr * v).astype(p.data.dtype, copy=False)


class SGD:
    def __init__(self, params: ParamStore, lr: float = 0.01, momentum: float = 0.937,
                 weight_decay: float = 5e-4,
                 decay_filter: Callable[[str, np.ndarray], bool] | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity,
                 self.decay_filter)
