"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.worst < self.tol


def gradient_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    atol: float = 1e-7,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward-pass gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated with each input entry perturbed by ``±h`` in place.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-3 * scale, atol)``
    where ``scale`` is the largest gradient magnitude over all inputs; entries
    whose true gradient is tiny next to the rest of the function (and so
    dominated by round-off in the differences) are judged on an absolute
    footing.
    ``max_entries`` limits the number of probed entries per input (sampled).
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradient_check requires 64-bit inputs")
        x.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    failures: list[str] = []
    if not np.isfinite(out.data).all():
        return GradCheckReport([float("inf")] * len(inputs), tol, ["non-finite forward value"])
    out.backward()
    errors = []
    pairs = []
    for k, x in enumerate(inputs):
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        pairs.append((analytic.reshape(-1)[idx], numeric))
    finite = [np.isfinite(a).all() and np.isfinite(n).all() for a, n in pairs]
    scale = max((max(np.abs(a).max(), np.abs(n).max()) for (a, n), ok in zip(pairs, finite) if ok), default=0.0)
    for k, ((a, numeric), ok) in enumerate(zip(pairs, finite)):
        if not ok:
            failures.append(f"input {k}: non-finite gradient")
            errors.append(float("inf"))
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), max(1e-3 * scale, atol))
        errors.append(float((np.abs(a - numeric) / denom).max()))
    return GradCheckReport(errors, tol, failures)
