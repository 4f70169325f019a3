"""Adam with bias correction, operating on lists of plain arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeMismatchError, tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, params: Sequence[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, step=0,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One Adam update; mutates `state`, returns the new parameter arrays."""
    if len(params) != len(grads):
        raise ShapeMismatchError("adam_step", [("params", len(params)), ("grads", len(grads))])
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = tensor(p)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatchError("adam_step", [p.shape, g.shape])
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return out
