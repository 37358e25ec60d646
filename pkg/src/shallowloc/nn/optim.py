from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter


class TrainingError(RuntimeError):
    pass


@dataclass
class SGDMomentum:
    """Momentum SGD with weight decay folded into the velocity.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """

    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: dict = field(default_factory=dict)

    def step(self, params: list[Parameter]):
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise TrainingError(f"non-finite gradient in {p.name} ({bad} entries)")
        for p in params:
            v = self.velocity.get(p.name)
            if v is None:
                v = self.velocity[p.name] = np.zeros_like(p.value)
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.value
            p.value -= self.learning_rate * v

    @staticmethod
    def zero_grad(params: list[Parameter]):
        for p in params:
            p.grad[...] = 0.0
