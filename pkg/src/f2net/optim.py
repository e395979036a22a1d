"""Stochastic gradient descent, plain and with momentum."""

from __future__ import annotations

from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * p.grad``, then clear the gradients.

    Raises ``ValueError`` if any parameter has no gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    for p in params:
        p.data -= (lr * p.grad).astype(p.data.dtype)
        p.grad = None


def global_norm(params: Iterable[Tensor]) -> float:
    """L2 norm of all gradients taken together."""
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))


def clip_gradients(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before scaling.
    """
    params = list(params)
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


class MomentumSGD:
    """SGD with dampened momentum: ``v <- m*v + (1-m)*g``, ``p <- p - lr*v``.

    With ``momentum=0`` and no clipping a step is exactly :func:`sgd_step`.
    A positive ``clip_norm`` rescales the gradients so their global L2 norm
    is at most ``clip_norm``. Velocities are keyed by parameter name so they
    can be saved and restored.
    """

    def __init__(self, lr: float, momentum: float = 0.9, velocity: Optional[Mapping[str, np.ndarray]] = None,
                 clip_norm: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if clip_norm < 0.0:
            raise ValueError(f"clip_norm must be >= 0, got {clip_norm}")
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64) for k, v in (velocity or {}).items()}

    def step(self, named: Mapping[str, Tensor]) -> None:
        for name, p in named.items():
            if p.grad is None:
                raise ValueError(f"MomentumSGD: parameter {name} has no gradient")
        if self.clip_norm > 0.0:
            clip_gradients(named.values(), self.clip_norm)
        if self.momentum == 0.0:
            sgd_step(named.values(), self.lr)
            return
        m = self.momentum
        for name in sorted(named):
            p = named[name]
            v = self.velocity.get(name)
            v = (1.0 - m) * p.grad if v is None else m * v + (1.0 - m) * p.grad
            self.velocity[name] = v
            p.data -= (self.lr * v).astype(p.data.dtype)
            p.grad = None
