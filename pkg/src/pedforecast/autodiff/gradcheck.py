"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, current_tape, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    excluded: int
    per_input: list = field(default_factory=list)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}), "
                f"{self.checked} elements checked, {self.excluded} excluded")


def _eval(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(f().data.reshape(-1)[0])


def _central(f, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = _eval(f)
    flat[i] = orig - h
    fm = _eval(f)
    flat[i] = orig
    return (fp - fm) / (2 * h)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    exclude_below: float = 1e-8,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each element of each input perturbed by ``±h``
    in place.  Elements where ``|analytic| + |numeric| < exclude_below`` are
    skipped.  With ``max_elements`` only a random subset per input is probed.
    """
    for t in inputs:
        t.grad = None
    current_tape().reset()
    out = f()
    if out.requires_grad:
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = excluded = 0
    per_input = []
    for t, ga in zip(inputs, analytic):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        gflat = ga.reshape(-1)
        local = 0.0
        for i in idx:
            a = float(gflat[i])
            num = _central(f, flat, i, h)
            if abs(a) + abs(num) < exclude_below:
                excluded += 1
                continue
            checked += 1
            local = max(local, abs(a - num) / max(abs(a), abs(num)))
        per_input.append(local)
        worst = max(worst, local)
    return GradCheckReport(worst, worst < tol, tol, checked, excluded, per_input)
