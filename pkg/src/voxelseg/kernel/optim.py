"""Classical SGD with momentum: v <- m*v + g, p <- p - lr*v."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def init_velocity(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p.data) for name, p in params.items()}


def sgd_momentum_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Update params and velocity in place; missing grads count as zero."""
    for name, p in params.items():
        v = velocity[name]
        g = grads.get(name)
        v *= momentum
        if g is not None:
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
            v += g
        p.data -= lr * v
    return params, velocity
