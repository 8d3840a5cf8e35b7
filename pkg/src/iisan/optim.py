"""Adam with bias correction, no weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class GradientSetError(ValueError):
    """Gradient map does not cover exactly the optimizer's parameter set."""


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def moment_bytes(self) -> int:
        return sum(m.nbytes + v.nbytes for m, v in zip(self.m, self.v))

    @property
    def param_bytes(self) -> int:
        return sum(p.nbytes for p in self.params)

    def step(self, grads: dict):
        """Apply one update. ``grads`` maps each parameter tensor to its gradient.

        Parameter arrays are replaced, not mutated, so arrays captured by an
        earlier forward pass keep their values.
        """
        own = {id(p) for p in self.params}
        extra = [t for t in grads if id(t) not in own]
        missing = [p for p in self.params if p not in grads]
        if missing or extra:
            raise GradientSetError(
                f"gradient map mismatch: missing={[p.name for p in missing]} "
                f"extra={[t.name for t in extra]}"
            )
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = grads[p]
            dt = p.data.dtype
            self.m[i] = (self.beta1 * self.m[i] + (1.0 - self.beta1) * g).astype(dt, copy=False)
            self.v[i] = (self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)).astype(dt, copy=False)
            if self.lr == 0.0:
                continue
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
