from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .registry import ParameterRegistry


def _scalar(loss) -> float:
    value = float(np.asarray(loss.data).reshape(()))
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite: {value}")
    return value


def grad_check_report(f, params: ParameterRegistry, eps=1e-5, paths=None) -> dict[str, float]:
    """Per-parameter max relative error between tape and central differences.

    The error for one element is ``|g_ad - g_fd| / max(1, |g_fd|)``. ``f`` is
    called with no arguments and must return a scalar Tensor built from the
    registry's current values (dropout off, float64).
    """
    params.zero_grad()
    _scalar(f_value := f())
    f_value.backward()
    report = {}
    for path, t in params.items():
        if paths is not None and path not in paths:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        t.data = np.asarray(t.data)
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f())
            flat[i] = orig - eps
            down = _scalar(f())
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        report[path] = worst
    params.zero_grad()
    return report


def grad_check(f, params: ParameterRegistry, eps=1e-5, paths=None) -> float:
    report = grad_check_report(f, params, eps, paths)
    return max(report.values()) if report else 0.0
