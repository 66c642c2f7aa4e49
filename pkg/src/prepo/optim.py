"""Plain-numpy AdamW."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: np.ndarray | None = None
    exp_avg_sq: np.ndarray | None = None


def adamw_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update for a minimization gradient; returns new params and state.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the adaptive step.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match params {params.shape}")
    m = np.zeros_like(params) if state.exp_avg is None else state.exp_avg
    v = np.zeros_like(params) if state.exp_avg_sq is None else state.exp_avg_sq
    if m.shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape")
    t = state.step + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamWState(t, m, v)
