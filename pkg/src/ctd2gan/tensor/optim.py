"""Adam with bias correction; state lives on each Parameter."""
from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    def __init__(self, params, lr: float = 0.0002, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.epsilon)


def adam_step(p: Parameter, lr=0.0002, beta1=0.9, beta2=0.999, epsilon=1e-8) -> None:
    """One update of ``p`` from ``p.grad`` (a missing gradient counts as zero)."""
    g = np.zeros_like(p.data) if p.grad is None else p.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    p.step_count += 1
    p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
    p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
    m_hat = p.adam_m / (1 - beta1 ** p.step_count)
    v_hat = p.adam_v / (1 - beta2 ** p.step_count)
    p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + epsilon)
