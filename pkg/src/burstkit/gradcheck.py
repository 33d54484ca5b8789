"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    passed: bool


def numeric_grad(
    fn: Callable[[], float], arr: np.ndarray, indices: Sequence[tuple], step: float = 1e-5
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` entries, perturbing in place."""
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = arr[idx]
        arr[idx] = orig + step
        hi = fn()
        arr[idx] = orig - step
        lo = fn()
        arr[idx] = orig
        out[k] = (hi - lo) / (2 * step)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    An entry passes when ``|a - n| <= rtol * max(|a|, |n|)`` or ``|a - n| <= atol``.
    ``max_entries`` caps how many coordinates per tensor are probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    worst_rel = worst_abs = 0.0
    n = 0
    ok = True
    for t, ga in zip(tensors, analytic):
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        gn = numeric_grad(value, t.data, all_idx, step)
        gs = np.array([ga[i] for i in all_idx])
        diff = np.abs(gs - gn)
        scale = np.maximum(np.abs(gs), np.abs(gn))
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
        entry_ok = (diff <= rtol * scale) | (diff <= atol)
        ok &= bool(entry_ok.all())
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
        worst_rel = max(worst_rel, float(np.where(diff <= atol, 0.0, rel).max(initial=0.0)))
        n += len(all_idx)
    return GradCheckResult(worst_rel, worst_abs, n, ok)
