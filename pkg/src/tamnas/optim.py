"""SGD with momentum and piecewise-constant learning rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SGD:
    """Heavy-ball SGD with coupled L2 weight decay (the classic formulation).

    ``buf <- mu * buf + (g + wd * w)``; ``w <- w - lr * buf``. Parameters and
    momentum buffers are updated in place, so views into a larger store
    write straight through.
    """

    momentum: float = 0.9
    weight_decay: float = 5e-4

    def step(self, params: dict, grads: dict, buffers: dict, lr: float) -> None:
        for name, t in params.items():
            g = grads.get(name)
            if g is None:
                continue
            w = t.data
            d = g.astype(np.float32, copy=False) + np.float32(self.weight_decay) * w
            buf = buffers[name]
            buf *= np.float32(self.momentum)
            buf += d
            w -= np.float32(lr) * buf


def step_lr(base: float, epoch: int, milestones, gamma: float = 0.1) -> float:
    """``base * gamma**k`` where k counts milestones already reached."""
    k = sum(1 for m in milestones if epoch >= m)
    return base * gamma**k


def zero_buffers(params: dict) -> dict:
    return {name: np.zeros_like(t.data) for name, t in params.items()}
