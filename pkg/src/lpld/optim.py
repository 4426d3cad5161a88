"""Adam with bias correction, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from lpld.errors import NonFiniteError
from lpld.tensor import Tensor


class AdamState:
    """First/second moment buffers per tensor; step starts at 0."""

    def __init__(self):
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.step = 0


def adam_step(params, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update over named parameter tensors.

    Updates tensor data in place (buffers may be shared with BN state).
    Raises on non-finite gradients, naming the offending tensor.
    Parameters without a gradient are left untouched.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(t.name or f"param{i}", t) for i, t in enumerate(params)]
    b1, b2 = betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in items:
        if not isinstance(p, Tensor):
            raise TypeError(f"{name}: adam_step expects Tensor parameters")
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for tensor {name!r}")
        if weight_decay:
            # decoupled decay (AdamW style)
            p.data *= (1.0 - lr * weight_decay)
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.0) -> float:
    """Cosine annealing from base_lr down to floor over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))
