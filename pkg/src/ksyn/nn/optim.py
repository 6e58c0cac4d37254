"""Adam with bias correction and an exponential moving average of weights."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Parameter

__all__ = ["Adam", "EMA"]


class Adam:
    """Adam optimizer; a step with any non-finite gradient is skipped and counted."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.skipped = 0

    def step(self) -> bool:
        if not all(np.all(np.isfinite(p.grad)) for p in self.params):
            self.skipped += 1
            return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        return {"m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v],
                "step_count": self.step_count, "skipped": self.skipped}

    def load_state(self, state: dict) -> None:
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]
        self.step_count = int(state["step_count"])
        self.skipped = int(state.get("skipped", 0))


class EMA:
    """Shadow copies updated as ``shadow += (1 - d) * (param - shadow)``.

    With ``warmup`` the effective decay is ``min(decay, (1 + n) / (10 + n))``
    after ``n`` updates, so early shadows are not dominated by the initial
    weights.
    """

    def __init__(self, params: Sequence[Parameter], decay: float = 0.999, zero_init: bool = False,
                 warmup: bool = False):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.shadow = [np.zeros_like(p.data) if zero_init else p.data.copy() for p in self.params]
        self.step_count = 0
        self.warmup = warmup

    def current_decay(self) -> float:
        if self.warmup:
            n = self.step_count
            return min(self.decay, (1.0 + n) / (10.0 + n))
        return self.decay

    def update(self) -> list[np.ndarray]:
        d = self.current_decay()
        for s, p in zip(self.shadow, self.params):
            # incremental form: exact when the shadow already equals the parameter
            s += (1.0 - d) * (p.data - s)
        self.step_count += 1
        return self.shadow

    def swap(self) -> None:
        """Exchange live parameters and shadows (call twice to restore)."""
        for i, p in enumerate(self.params):
            p.data, self.shadow[i] = self.shadow[i], p.data
