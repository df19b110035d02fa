"""Finite-difference verification of the analytic gradients.

`loss_fn` must zero all gradients, run forward + backward, and return the
scalar loss, leaving analytic gradients in the parameters.  Central
differences then probe parameter entries one at a time.  For large models an
entry subsample per tensor keeps the cost sane; every tensor is always
covered.  Run in float64 for meaningful tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import Param


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        return f"grad check: {self.checked} entries, max rel error {self.max_rel_error:.3e} ({self.worst_param})"


def grad_check(
    loss_fn,
    params: list[Param],
    h: float = 1e-5,
    entries_per_param: int | None = None,
    seed: int = 0,
    loss_only_fn=None,
) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    probe = loss_only_fn if loss_only_fn is not None else loss_fn

    worst = 0.0
    worst_name = ""
    checked = 0
    per_param: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if entries_per_param is None or entries_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=entries_per_param, replace=False)
            idx.sort()
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            hi = probe()
            flat[i] = orig - step
            lo = probe()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            ana = float(analytic[p.name].reshape(-1)[i])
            denom = max(abs(ana), abs(fd), 1e-8)
            rel = abs(ana - fd) / denom
            worst_here = max(worst_here, rel)
            checked += 1
        per_param[p.name] = worst_here
        if worst_here > worst:
            worst = worst_here
            worst_name = p.name
    # Restore analytic gradients for the caller.
    loss_fn()
    return GradCheckReport(worst, worst_name, checked, per_param)
