"""Finite-difference verification of reverse-mode gradients.

``grad_check`` compares tape gradients of a scalar loss against central
differences, parameter by parameter.  Relative error uses
``|fd - an| / max(|fd|, |an|, floor)`` so that near-zero coordinates are
judged on absolute error.  Large parameters can be spot-checked on a
seeded random subset of coordinates instead of exhaustively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore


class GradCheckError(RuntimeError):
    """Raised when the loss turns non-finite during checking."""


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _loss_value(loss_fn, context: str) -> float:
    value = loss_fn().item()
    if not math.isfinite(value):
        raise GradCheckError(f"non-finite loss ({value}) {context}")
    return value


def grad_check(loss_fn, store: ParameterStore, step: float = 1e-5,
               max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check d(loss)/d(theta) for every trainable parameter in the store.

    loss_fn must rebuild the graph from the store's current values on every
    call and return a scalar Tensor.  The store's values are perturbed in
    place and restored exactly.
    """
    store.zero_grad()
    loss = loss_fn()
    if not math.isfinite(loss.item()):
        raise GradCheckError(f"non-finite loss ({loss.item()}) at the base point")
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in store.trainable_items()}

    report = GradCheckReport()
    for name, t in store.trainable_items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_param, replace=False)
        an_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = _loss_value(loss_fn, f"perturbing {name}[{i}] by +{step}")
            flat[i] = orig - step
            down = _loss_value(loss_fn, f"perturbing {name}[{i}] by -{step}")
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            an = an_flat[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            report.n_checked += 1
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
