"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    errors: list[float] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    *,
    op_name: str = "f",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against ``(f(x+eps) - f(x-eps)) / 2eps`` per coordinate.

    ``f(*inputs)`` must return a single-element tensor. Inputs are perturbed
    in place and restored. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``; ``errors`` holds the worst one for each
    input. ``max_coords`` samples that many coordinates (across all inputs)
    instead of sweeping every one.

    float32 round-off in the perturbed evaluations is ~1e-7 / eps, so tight
    tolerances need float64 inputs and parameters.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(*inputs)
        analytic = [g.data for g in tape.backward(y, wrt=inputs).values()]
    finally:
        for x, flag in zip(inputs, saved):
            x.requires_grad = flag

    coords = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = [0.0] * len(inputs)
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = f(*inputs).item()
        flat[j] = orig - eps
        down = f(*inputs).item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[i].reshape(-1)[j])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst[i] = max(worst[i], rel)
    return GradCheckReport(op_name, max(worst) if worst else 0.0, worst)
