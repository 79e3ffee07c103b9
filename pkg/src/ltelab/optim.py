from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def apply_update(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step on a minimization gradient.

    Returns ``(new_theta, new_state)``; inputs are not modified.
    """
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)
