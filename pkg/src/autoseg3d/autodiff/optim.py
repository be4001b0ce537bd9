"""Adam with a step-decayed learning rate."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.0005
    decay_factor: float = 0.984
    decay_every: int = 100

    def __call__(self, step):
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        # repeated multiplication keeps lr(t + decay_every) == decay_factor * lr(t) exactly
        lr = self.initial
        for _ in range(step // self.decay_every):
            lr = lr * self.decay_factor
        return lr


def adam_step(params, schedule, step, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update at 0-based ``step``.

    Parameters without a gradient are updated as if their gradient were zero.
    """
    lr = schedule(step)
    t = step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape or p.m.shape != p.data.shape or p.v.shape != p.data.shape:
            raise ValueError(f"adam_step: shape mismatch for {p.name}: param {p.data.shape}, "
                             f"grad {g.shape}, slots {p.m.shape}/{p.v.shape}")
        dt = p.data.dtype.type
        p.m *= dt(beta1)
        p.m += dt(1.0 - beta1) * g
        p.v *= dt(beta2)
        p.v += dt(1.0 - beta2) * (g * g)
        update = (p.m / dt(c1)) / (np.sqrt(p.v / dt(c2)) + dt(eps))
        p.data -= dt(lr) * update
        p.step = t
    return lr
