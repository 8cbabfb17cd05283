from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update; inputs are left untouched.

    Raises FloatingPointError on non-finite gradients (diverged training).
    """
    for k, g in grads.items():
        if k not in params or g.shape != params[k].shape:
            raise ValueError(f"gradient {k!r} does not match parameters")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k!r}; training diverged")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        if g is None:
            new_p[k], new_m[k], new_v[k] = p, m, v
            continue
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - step).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, replace(state, step=t, m=new_m, v=new_v)
