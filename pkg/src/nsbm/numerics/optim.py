"""Adaptive-moment (Adam) optimizer over a named parameter store."""

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the step was not applied."""

    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        return state


def adam_step(params, grads, state):
    """Apply one Adam update in place and return ``params``.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient (their moments still decay). The whole step is refused if any
    gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        lr = state.lr * state.lr_scale.get(name, 1.0)
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params
