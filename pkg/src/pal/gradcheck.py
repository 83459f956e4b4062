"""Central finite-difference gradient checking for tape-recorded functions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, tape, zero_grads

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tol for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err >= self.tol]

    def summary(self) -> str:
        lines = []
        for e in sorted(self.entries, key=lambda e: -e.max_rel_err):
            mark = "ok  " if e.max_rel_err < self.tol else "FAIL"
            lines.append(f"  {mark} {e.name}: max rel err {e.max_rel_err:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    # Activations here are O(1), so errors on tiny gradients are measured
    # absolutely; this keeps FD truncation noise from inflating the ratio.
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradcheck(f, params: dict[str, Tensor], h: float = DEFAULT_STEP,
              tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare analytic gradients of the scalar function `f()` against
    central finite differences for every element of every named parameter.

    `f` must be deterministic and read its inputs from `params` (closure).
    """
    zero_grads(params.values())
    with tape() as tp:
        loss = f()
    if loss.data.size != 1:
        raise ValueError("gradcheck requires a scalar-valued function")
    backward(loss, tp)

    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        worst_i = -1
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            try:
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"non-finite value while probing {name}[{i}]: {exc}") from exc
            finally:
                flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = _rel_err(analytic.reshape(-1)[i], numeric)
            if err > worst:
                worst, worst_i = err, i
        report.entries.append(GradCheckEntry(name, worst, worst_i))
    return report
