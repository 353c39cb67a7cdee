"""Adam over dictionaries of numpy arrays."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Step counter, moment accumulators and hyperparameters.

    ``max_step`` optionally clamps each element's update to ``[-max_step, max_step]``.
    With ``shared_scale`` the second moment of each parameter array is a single
    scalar (the mean of ``g**2``), so the update keeps the gradient's relative
    magnitudes across elements instead of normalizing each one separately.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_step: float = None
    shared_scale: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.max_step,
            self.shared_scale,
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def update(self, params, grads, lr=None):
        """Advance one step in place; return a new dict of updated parameters."""
        lr = self.lr if lr is None else lr
        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros(()) if self.shared_scale else np.zeros_like(g)
            elif self.m[k].shape != g.shape:
                raise ValueError(f"gradient for {k!r} has shape {g.shape}, state has {self.m[k].shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            g2 = np.mean(g * g) if self.shared_scale else g * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g2
            delta = lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.max_step is not None:
                delta = np.clip(delta, -self.max_step, self.max_step)
            out[k] = p - delta
        return out
