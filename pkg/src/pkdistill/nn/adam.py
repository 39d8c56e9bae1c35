from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.step)


def adam_step(params, grads, state: AdamState, hyper: AdamHyper = AdamHyper(), trainable=None):
    """One bias-corrected Adam update. Inputs are left untouched.

    ``trainable`` optionally masks which tensors may move; frozen tensors keep
    their values and moments.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and Adam moments must have the same length")
    if state.step < 0:
        raise ValueError(f"step counter must be >= 0, got {state.step}")
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ValueError(f"tensor {i}: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape} disagree")
        if trainable is not None and not trainable[i]:
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        dt = p.dtype
        m = (b1 * m + (1 - b1) * g).astype(dt, copy=False)
        v = (b2 * v + (1 - b2) * g * g).astype(dt, copy=False)
        step = (hyper.learning_rate / corr1) * m / (np.sqrt(v / corr2) + hyper.epsilon)
        new_p.append((p - step).astype(dt, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)
