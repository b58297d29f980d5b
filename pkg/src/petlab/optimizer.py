"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr_scale=1.0):
        self.t += 1
        lr = self.lr * lr_scale
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


class LinearWarmupSchedule:
    """Linear ramp over the first warmup fraction, then linear decay to zero."""

    def __init__(self, total_steps, warmup_ratio=0.1):
        self.total = max(1, int(total_steps))
        self.warmup = max(1, int(round(self.total * warmup_ratio)))

    def scale(self, step):
        if step < self.warmup:
            return (step + 1) / self.warmup
        remaining = self.total - self.warmup
        if remaining <= 0:
            return 1.0
        return max(0.0, (self.total - step) / remaining)
