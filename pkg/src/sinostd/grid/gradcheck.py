"""Central finite-difference verification of analytic gradients.

Probes run the whole graph in float64 (inputs are upcast), so the comparison
is limited by truncation error of the central difference, not storage
precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    n_probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      tolerance: float = 1e-4, delta: float = 1e-5,
                      max_probes_per_input: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of sum(op(*inputs)) against central differences.

    `op` takes Tensors and returns one Tensor; every element of every input is
    probed unless max_probes_per_input caps it (then a seeded random subset).
    """
    rng = np.random.default_rng(seed)
    base = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in base]
    out = op(*tensors)
    loss = out.sum() if out.shape != () else out
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(args) -> float:
        ts = [Tensor(a, dtype=np.float64) for a in args]
        o = op(*ts)
        return float(o.data.sum(dtype=np.float64))

    max_rel = 0.0
    worst = (0, ())
    n_probes = 0
    for i, a in enumerate(base):
        flat_indices = np.arange(a.size)
        if max_probes_per_input is not None and a.size > max_probes_per_input:
            flat_indices = rng.choice(a.size, size=max_probes_per_input, replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(flat, a.shape) if a.ndim else ()
            h = delta * max(1.0, abs(a[idx]))
            plus = [b.copy() if j == i else b for j, b in enumerate(base)]
            minus = [b.copy() if j == i else b for j, b in enumerate(base)]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric = (scalar(plus) - scalar(minus)) / (2.0 * h)
            ref = analytic[i][idx]
            rel = abs(numeric - ref) / max(abs(numeric), abs(ref), 1e-8)
            n_probes += 1
            if rel > max_rel:
                max_rel = rel
                worst = (i, idx)
    return GradCheckReport(max_rel_error=float(max_rel), worst_input=worst[0],
                           worst_index=worst[1], n_probes=n_probes, tolerance=tolerance)
