"""Decoupled-weight-decay Adam.

Parameters with no gradient are skipped entirely for the step (no decay,
no moment update), so branches excluded from a loss stay bitwise intact.
Updates are applied in the caller-supplied parameter order, which keeps
training runs reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr < 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
            raise ParameterError(
                f"bad optimizer settings lr={lr} beta1={beta1} beta2={beta2}"
            )
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            id(p): {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for p in self.params
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            s = self.state[id(p)]
            s["t"] += 1
            t = s["t"]
            g = p.grad
            s["m"] = self.beta1 * s["m"] + (1.0 - self.beta1) * g
            s["v"] = self.beta2 * s["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = s["m"] / (1.0 - self.beta1**t)
            v_hat = s["v"] / (1.0 - self.beta2**t)
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )
