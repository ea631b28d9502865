"""Adam over flat parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Entries without a gradient are carried over untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape mismatch for {name!r}")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name in sorted(grads):
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        new_p[name] = params[name] - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(step, new_m, new_v, b1, b2, state.eps)
