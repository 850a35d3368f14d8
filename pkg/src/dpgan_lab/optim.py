"""Adam with an optional linear warmup (off by default)."""
from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.t / self.warmup_steps)
        return self.lr

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(DTYPE)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.asarray(arrays[f"m/{k}"], dtype=DTYPE).copy()
            self.v[k] = np.asarray(arrays[f"v/{k}"], dtype=DTYPE).copy()
        self.t = t
