"""Adam updates and linear learning-rate decay shared by both optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are dicts of arrays with matching keys and shapes.
    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    if params.keys() != grads.keys():
        raise ValueError(f"param/grad keys differ: {sorted(params)} vs {sorted(grads)}")
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != np.shape(p):
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {np.shape(p)}")
        dtype = np.result_type(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != np.shape(p):
            raise ValueError(f"{name}: moment shape {m.shape} != param shape {np.shape(p)}")
        m = (beta1 * m + (1.0 - beta1) * g).astype(dtype, copy=False)
        v = (beta2 * v + (1.0 - beta2) * g * g).astype(dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - update).astype(dtype, copy=False)
        m_out[name] = m
        v_out[name] = v
    return new_params, AdamState(m_out, v_out, t)


def linear_decay(index: int, count: int, start: float, end: float) -> float:
    """Linear interpolation from ``start`` at index 0 to ``end`` at ``count - 1``."""
    if not 0 <= index < count:
        raise ValueError(f"index {index} outside [0, {count})")
    if count == 1:
        return float(start)
    return float(start + (end - start) * index / (count - 1))
