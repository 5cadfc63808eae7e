"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import kink_watch
from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: int
    worst_index: tuple[int, ...] | None = None


def _eval(f: Callable[[], Tensor]) -> tuple[float, str]:
    with kink_watch() as h:
        value = f()
    return float(value.data), h.hexdigest()


def gradient_check(
    f: Callable[[], Tensor],
    point: Tensor,
    h: float = 1e-5,
    coords: Sequence[tuple[int, ...]] | None = None,
    kink_guard: bool = False,
    kink_radius: float = 10.0,
) -> GradCheckResult:
    """Compare backprop gradients of ``f`` w.r.t. ``point`` to central differences.

    ``f`` takes no arguments and must read ``point.data`` each call, so
    in-place perturbations are visible. With ``kink_guard`` a coordinate is
    skipped when moving it by ``kink_radius * h`` either way changes any
    relu mask or max-pool argmax seen during evaluation.
    """
    was = point.requires_grad
    point.requires_grad = True
    point.grad = None
    try:
        loss = f()
        backward(loss)
        analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    finally:
        point.requires_grad = was
        point.grad = None

    if coords is None:
        coords = list(np.ndindex(*point.shape))
    _, base_pattern = _eval(f) if kink_guard else (None, None)

    worst, worst_idx, checked, excluded = 0.0, None, 0, 0
    data = point.data
    for idx in coords:
        orig = data[idx]
        if kink_guard:
            flipped = False
            for step in (kink_radius * h, -kink_radius * h):
                data[idx] = orig + step
                if _eval(f)[1] != base_pattern:
                    flipped = True
                    break
            data[idx] = orig
            if flipped:
                excluded += 1
                continue
        data[idx] = orig + h
        fp = float(f().data)
        data[idx] = orig - h
        fm = float(f().data)
        data[idx] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic[idx]
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        checked += 1
        if rel > worst:
            worst, worst_idx = rel, tuple(int(i) for i in idx)
    return GradCheckResult(worst, checked, excluded, worst_idx)


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    kink_guard: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients of ``f(point)``."""
    return gradient_check(lambda: f(point), point, h=h, kink_guard=kink_guard).max_rel_error
