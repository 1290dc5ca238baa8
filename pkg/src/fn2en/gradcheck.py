"""Central finite-difference verification of analytic gradients (float64)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list = field(default_factory=list)

    def __float__(self):
        return float(self.max_rel_error)


def grad_check(fn, inputs, eps=1e-5, kink_tol=1e-2):
    """Compare ``backward`` against central differences for every input coordinate.

    ``fn`` receives one float64 :class:`Tensor` per entry of ``inputs`` (as
    keyword arguments) and returns a scalar tensor.  The error for a
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.

    A coordinate whose one-sided difference quotients disagree by more than
    ``kink_tol`` sits on a non-differentiable point (ReLU at 0, ``|x|`` at
    0); it is reported in ``excluded`` as ``(name, index)`` instead of being
    scored.
    """
    arrays = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    leaves = {name: Tensor(a.copy(), requires_grad=True) for name, a in arrays.items()}
    backward(fn(**leaves))

    def evaluate():
        with no_grad():
            return float(fn(**{k: Tensor(a) for k, a in arrays.items()}).item())

    f0 = evaluate()
    worst, checked, excluded = 0.0, 0, []
    for name, a in arrays.items():
        grad = leaves[name].grad
        if grad is None:
            grad = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + eps
            f_plus = evaluate()
            a[idx] = orig - eps
            f_minus = evaluate()
            a[idx] = orig
            forward, behind = (f_plus - f0) / eps, (f0 - f_minus) / eps
            if abs(forward - behind) > kink_tol * max(1.0, abs(forward), abs(behind)):
                excluded.append((name, idx))
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, abs(grad[idx] - numeric) / max(1.0, abs(numeric)))
            checked += 1
    return GradCheckResult(worst, checked, excluded)
