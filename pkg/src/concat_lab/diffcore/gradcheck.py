"""Central finite-difference check of backward gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward

# elementwise denominators never drop below this fraction of the tensor's largest gradient
SCALE_FLOOR = 1e-3


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = [f"{c.name}: max rel err {c.max_rel_error:.3e} {'ok' if c.passed else 'FAIL'}"
                 for c in self.checks]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), SCALE_FLOOR * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | list[Tensor],
              h: float = 1e-3, tol: float = 1e-4) -> GradcheckReport:
    """Compare ``backward`` against central differences for every parameter.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Failures are reported, never raised.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    loss = loss_fn()
    grads = backward(loss)
    report = GradcheckReport()
    for name, p in params.items():
        analytic = grads.get(p, np.zeros_like(p.data))
        p.data = np.ascontiguousarray(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        err = relative_error(analytic, numeric)
        report.checks.append(ParamCheck(name, err, err < tol))
    return report
