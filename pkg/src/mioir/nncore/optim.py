"""Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self):
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    period: int = 500
    restart: bool = True

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("cosine period must be >= 1")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")


def lr_at(schedule: CosineSchedule, it: int) -> float:
    """Learning rate at iteration ``it``.

    Cycles span ``(k*period, (k+1)*period]``: ``it = 0`` gives ``lr_max`` and
    every positive multiple of ``period`` gives ``lr_min``. With ``restart``
    the curve then jumps back up; otherwise it stays at ``lr_min``.
    """
    if it < 0:
        raise ValueError("iteration must be non-negative")
    T = schedule.period
    if schedule.restart:
        pos = 0 if it == 0 else (it - 1) % T + 1
    else:
        pos = min(it, T)
    if pos == 0:
        return schedule.lr_max
    if pos == T:
        return schedule.lr_min
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * pos / T))
