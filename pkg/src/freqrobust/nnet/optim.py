"""SGD with momentum and a multistep learning-rate schedule."""
from __future__ import annotations

import numpy as np


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place update of parallel lists of arrays.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    Only learnable arrays should be passed; batch-norm running statistics are
    buffers and never reach this function.
    """
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= (lr * v).astype(p.dtype, copy=False)


def lr_at_epoch(config, epoch: int) -> float:
    """``initial_lr * lr_gamma ** (number of lr_milestones <= epoch)``; epochs count from 0."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.initial_lr * config.lr_gamma**drops


class SGD:
    def __init__(self, model, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(layer.params[key]) for name, layer, key in model.parameters()}

    def step(self, lr: float) -> None:
        entries = self.model.parameters()
        sgd_step(
            [layer.params[key] for _, layer, key in entries],
            [layer.grads[key] for _, layer, key in entries],
            [self.velocity[name] for name, _, _ in entries],
            lr,
            self.momentum,
            self.weight_decay,
        )
