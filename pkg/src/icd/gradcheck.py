"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    tolerance: float
    diagnostic: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op_name}: max_abs={self.max_abs_err:.3e} "
                f"max_rel={self.max_rel_err:.3e} tol={self.tolerance:.0e}")


def grad_check(fn: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
               tolerance: float = 1e-4, h: float = 1e-5, op_name: str | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn(*inputs)`` with central differences.

    Each input is perturbed in place, one element at a time, and restored.
    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    name = op_name or getattr(fn, "__name__", "fn")

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"{name} is not scalar-valued (shape {out.shape})")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    if not all(np.all(np.isfinite(a)) for a in analytic):
        return GradCheckReport(name, float("inf"), float("inf"), False, tolerance,
                               "non-finite analytic gradient")

    max_abs = max_rel = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)  # view: edits land in t.data
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(af[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(af[i]), abs(num), 1e-8))
    for t in inputs:
        t.grad = None
    return GradCheckReport(name, max_abs, max_rel, max_rel <= tolerance, tolerance)
