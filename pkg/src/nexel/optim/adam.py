"""Adam with named parameter groups and row-resizable state for the
per-primitive groups (density control adds and removes rows)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA1 = 0.9
BETA2 = 0.999


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param, grad, state: AdamState, lr, eps=1e-8, beta1=BETA1, beta2=BETA2):
    """One in-place Adam update. ``lr`` may be a scalar or broadcastable array."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    grad = grad.astype(param.dtype, copy=False)
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return param, state


class Adam:
    """Holds one :class:`AdamState` per named group."""

    def __init__(self, params: dict, eps: dict | None = None):
        self.states = {name: AdamState.zeros_like(p) for name, p in params.items()}
        self.eps = eps or {}

    def step(self, params: dict, grads: dict, lrs: dict, skip=()):
        for name, p in params.items():
            if name in skip or name not in grads:
                continue
            adam_step(p, grads[name], self.states[name], lrs[name], self.eps.get(name, 1e-8))

    def remap_rows(self, names, source, fresh):
        """Reindex per-primitive state: row r takes old row ``source[r]``; ``fresh`` rows restart at zero."""
        for name in names:
            st = self.states[name]
            m, v = st.m[source], st.v[source]
            m[fresh] = 0
            v[fresh] = 0
            st.m, st.v = m, v
