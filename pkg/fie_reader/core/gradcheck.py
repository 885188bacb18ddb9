from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import DeterminismError
from .tensor import Array, Parameter, Tape, backward


logger = logging.getLogger(__name__)


@dataclass
class ParamCheck:
    name: str
    worst_rel: float
    worst_abs: float
    checked: int
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


@dataclass
class GradCheckReport:
    results: Dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    @property
    def worst_rel(self) -> float:
        return max((r.worst_rel for r in self.results.values()), default=0.0)

    def failures(self) -> List[ParamCheck]:
        return [r for r in self.results.values() if not r.passed]

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "params": {
                name: {"worst_rel": r.worst_rel, "worst_abs": r.worst_abs, "checked": r.checked, "passed": r.passed}
                for name, r in self.results.items()
            },
        }


def fd_step(value: np.ndarray) -> np.ndarray:
    """Central-difference step: cube root of machine epsilon scaled by |v|+1."""
    eps = np.finfo(value.dtype).eps
    return np.cbrt(eps) * (np.abs(value) + 1.0)


def _scalar(loss: Array) -> float:
    return float(np.asarray(loss.data).reshape(()))


def finite_diff_check(
    model_fn: Callable[[], Array],
    params: Sequence[Parameter],
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-8,
    max_elements: Optional[int] = None,
) -> GradCheckReport:
    """Compare autodiff gradients of ``model_fn()`` with central differences.

    ``model_fn`` must read the current values of ``params`` and return a
    scalar Array. An element passes when
    ``|analytic - numeric| <= abs_tol + rel_tol * max(|analytic|, |numeric|)``.
    ``max_elements`` caps how many entries per parameter are checked.
    """
    first = _scalar(model_fn())
    second = _scalar(model_fn())
    if first != second:
        raise DeterminismError(f"model_fn returned {first!r} then {second!r} for identical parameters")

    for p in params:
        p.zero_grad()
    with Tape():
        loss = model_fn()
    backward(loss)

    report = GradCheckReport()
    for p in params:
        analytic = p.grad.astype(np.float64).copy()
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        steps = fd_step(p.data).reshape(-1)
        count = flat.size if max_elements is None else min(flat.size, max_elements)
        for i in range(count):
            orig = flat[i]
            h = steps[i]
            flat[i] = orig + h
            plus = _scalar(model_fn())
            flat[i] = orig - h
            minus = _scalar(model_fn())
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
        a = analytic.reshape(-1)[:count]
        n = numeric.reshape(-1)[:count]
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        ok = diff <= abs_tol + rel_tol * scale
        significant = scale > abs_tol
        rel = np.where(significant, diff / np.where(significant, scale, 1.0), 0.0)
        check = ParamCheck(
            name=p.name,
            worst_rel=float(rel.max()) if count else 0.0,
            worst_abs=float(diff.max()) if count else 0.0,
            checked=count,
            passed=bool(ok.all()),
            analytic=analytic,
            numeric=numeric,
        )
        if not check.passed:
            logger.warning("gradient mismatch for %s: worst rel %.3e, worst abs %.3e", p.name, check.worst_rel, check.worst_abs)
        report.results[p.name] = check
        p.zero_grad()
    return report
