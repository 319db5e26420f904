"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or infinity."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Update ``params[name].data`` in place; returns the advanced state."""
    for name, g in grads.items():
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
