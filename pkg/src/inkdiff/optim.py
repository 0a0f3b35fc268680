"""Adam with bias correction, over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (name -> Tensor).

    Names missing from ``grads`` (or mapped to None) are left untouched, which
    is how frozen parameters stay bit-identical.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        g = g.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m.astype(p.data.dtype, copy=False)
        state.v[name] = v.astype(p.data.dtype, copy=False)
        update = (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype, copy=False)
        p.data = p.data - update
    return params, state
