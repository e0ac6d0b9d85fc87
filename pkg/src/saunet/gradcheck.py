"""Finite-difference verification of analytic gradients.

Central differences with a per-element step of ``h * max(1, |x|)``; relative
error uses ``|a - n| / max(|a|, |n|, 1e-6)`` so that pairs of near-zero
gradients compare as equal.  Requires float64 tensors and deterministic
(non-stochastic) forward functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradCheckEntry", "GradCheckReport", "grad_check", "grad_check_params"]

_REL_FLOOR = 1e-6


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def summary(self) -> str:
        lines = [
            f"  {e.name}: max rel err {e.max_rel_err:.3e} "
            f"({'ok' if e.max_rel_err <= self.tol else 'FAIL'} at tol {self.tol:.0e})"
            for e in self.entries
        ]
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _REL_FLOOR)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``params`` is an iterable of (name, tensor); every listed tensor is
    perturbed element by element, so ``loss_fn`` must re-read their ``data``
    buffers on each call.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss.dtype != np.float64:
        raise ValueError("gradient checking requires float64 tensors")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params
    }

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in params:
            arr = p.data
            worst = 0.0
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                step = h * max(1.0, abs(orig))
                arr[idx] = orig + step
                f_plus = float(loss_fn().data)
                arr[idx] = orig - step
                f_minus = float(loss_fn().data)
                arr[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = _rel_err(float(analytic[name][idx]), numeric)
                if err > worst:
                    worst = err
            report.entries.append(GradCheckEntry(name, worst))
    for _, p in params:
        p.zero_grad()
    return report


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Check gradients of ``f(*inputs)`` w.r.t. every requires-grad input."""
    named = [(f"arg{i}", t) for i, t in enumerate(inputs) if t.requires_grad]
    if not named:
        raise ValueError("no inputs require gradients")
    return grad_check_params(lambda: f(*inputs), named, tol=tol, h=h)
