"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    size: int


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def table(self):
        lines = [f"{'parameter':<24}{'size':>8}{'max rel err':>14}  status"]
        for e in self.entries:
            status = "ok" if e.max_rel_error < self.tol else "FAIL"
            lines.append(f"{e.name:<24}{e.size:>8}{e.max_rel_error:>14.3e}  {status}")
        return "\n".join(lines)


def _scalar(value):
    value = float(np.asarray(getattr(value, "data", value)))
    if not np.isfinite(value):
        raise NonFiniteError("objective returned a non-finite value")
    return value


def grad_check(f, params, h=1e-5, tol=1e-4):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the current values of ``params``
    (a mapping name -> Tensor with ``requires_grad``).  Every entry of every
    parameter is perturbed by ``±h``; the error for one entry is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    _scalar(loss)
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    report = GradCheckReport(tol=tol, h=h)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            errs = np.empty(flat.size)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = _scalar(f())
                flat[i] = orig - h
                down = _scalar(f())
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)
            errs = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
            k = int(np.argmax(errs)) if errs.size else 0
            report.entries.append(ParamCheck(
                name=name,
                max_rel_error=float(errs[k]) if errs.size else 0.0,
                worst_index=tuple(int(v) for v in np.unravel_index(k, p.shape)) if errs.size else (),
                analytic=float(a[k]) if errs.size else 0.0,
                numeric=float(numeric[k]) if errs.size else 0.0,
                size=int(flat.size),
            ))
    for p in params.values():
        p.zero_grad()
    return report
