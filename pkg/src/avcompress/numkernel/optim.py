"""Adam with bias correction and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place.

    Moments are keyed by position in ``params``, so pass the same list
    every step.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        if not p.trainable:
            continue
        g = p.grad
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 30000
    min_lr: float = 1e-5
    final_scale: float = 0.05

    def __call__(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to the peak, cosine decay toward ``peak * final_scale``.

    Every value is floored at ``min_lr``, which also keeps step 0 positive.
    """
    s = schedule
    if step < s.warmup_steps:
        raw = s.peak_lr * step / s.warmup_steps
    elif step >= s.total_steps:
        raw = s.peak_lr * s.final_scale
    else:
        span = max(1, s.total_steps - s.warmup_steps)
        progress = (step - s.warmup_steps) / span
        final = s.peak_lr * s.final_scale
        raw = final + (s.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return max(s.min_lr, raw)
