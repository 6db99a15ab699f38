"""Adaptive-moment optimizer with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class AdamState:
    """First/second moment accumulators for one named parameter group.

    One shared step counter; moment arrays are created lazily at first use
    and always match their parameter's shape.
    """

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float,
              wd: float = 0.0) -> None:
    """One update over the group. Parameters without a gradient are skipped
    entirely (no decay, no moment update), so an untouched branch stays put.

    Decoupled decay shrinks the parameter before the moment step:
    p *= (1 - lr*wd); then bias-corrected m_hat / (sqrt(v_hat) + eps).
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient in {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if wd:
            p.data *= 1.0 - lr * wd
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
