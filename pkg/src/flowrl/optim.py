"""AdamW with decoupled weight decay over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import NumericError


@dataclass
class AdamState:
    """First/second moment estimates plus the update counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n, dtype=np.float64), np.zeros(n, dtype=np.float64), 0)


def adamw_step(values: np.ndarray, grads: np.ndarray, state: AdamState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 0.0, eps: float = 1e-8
               ) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; returns new values and state (inputs untouched)."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if values.shape != grads.shape or values.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shapes must match")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradients; update aborted")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_values = values - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * values)
    return new_values, AdamState(m, v, t)
