"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, int] | None
    finite: bool = True
    note: str = ""

    def passed(self, tolerance: float) -> bool:
        return self.finite and self.max_rel_error < tolerance


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed(self.tolerance) for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed(self.tolerance)]

    def __str__(self) -> str:
        lines = []
        for p in self.params:
            status = "ok  " if p.passed(self.tolerance) else "FAIL"
            lines.append(f"{status} {p.name:<24} rel={p.max_rel_error:.3e} at {p.worst_index} {p.note}")
        return "\n".join(lines)


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Parameter]) -> dict:
    with Tape() as tape:
        out = fn()
    if out.shape != (1, 1):
        raise ValueError(f"grad_check needs a scalar output, got {out.shape}")
    if not tape.nodes:
        return {p: np.zeros_like(p.data) for p in params}
    return tape.backward(out, wrt=params)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    ``fn`` must read the current values of ``params`` on every call.  The
    relative error of one entry is ``|a - n| / max(|a|, |n|, atol)``; ``atol``
    keeps entries whose true gradient is ~0 from dividing by round-off.
    """
    analytic = analytic_gradients(fn, params)
    report = GradCheckReport(tolerance)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        a = analytic[p]
        num = np.empty_like(p.data)
        finite = True
        bad_at = None
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = fn().item()
            p.data[idx] = orig - h
            fm = fn().item()
            p.data[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
            if not np.isfinite(num[idx]) and finite:
                finite, bad_at = False, idx
        if not finite:
            report.params.append(ParamCheck(name, float("inf"), bad_at, False, "non-finite finite difference"))
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), atol)
        rel = np.abs(a - num) / denom
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else None
        report.params.append(ParamCheck(name, float(rel.max(initial=0.0)), worst))
    return report
