"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        out = {"__step__": np.array(self.step)}
        for k in self.m:
            out["m:" + k] = self.m[k]
            out["v:" + k] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AdamState":
        state = cls(step=int(arrays["__step__"]))
        for key in arrays:
            if key.startswith("m:"):
                name = key[2:]
                state.m[name] = np.array(arrays[key])
                state.v[name] = np.array(arrays["v:" + name])
        return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update of ``params`` (a name -> array dict) for the names in ``grads``.

    Returns new parameter and state objects; inputs are left untouched.
    """
    b1, b2 = betas
    step = state.step + 1
    new_params = dict(params)
    new_state = AdamState(step, dict(state.m), dict(state.v))
    for name, g in grads.items():
        p = params[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_params[name] = p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_norm(grads: dict, max_norm: float):
    """Scale gradients so their joint norm is at most ``max_norm``; returns (grads, norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
