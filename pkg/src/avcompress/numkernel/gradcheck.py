"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    checked_elements: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float | None = None,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are reduced with a fixed random weighting so every
    output element contributes. The relative error of one input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``;
    the floor keeps structurally-zero gradients (e.g. attention key biases)
    from dividing roundoff by roundoff.
    ``max_elements`` samples that many coordinates per input instead of
    perturbing all of them.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar() -> float:
        return float((fn(*inputs).data * weights).sum())

    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = np.zeros_like(t.data) if t.grad is not None else None
    out = fn(*inputs)
    (out * Tensor(weights)).sum().backward()

    errors = []
    total = 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.zeros(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        errors.append(float(np.abs(a - numeric).max(initial=0.0) / scale))
        total += idx.size
    report = GradCheckReport(max(errors, default=0.0), errors, total)
    if tolerance is not None and not report.passed(tolerance):
        raise AssertionError(f"gradient check failed: max rel error {report.max_rel_error:.3e} >= {tolerance}")
    return report
