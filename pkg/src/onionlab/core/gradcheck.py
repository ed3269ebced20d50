from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor, forward_backward


def numeric_grads(loss_fn: Callable[..., Tensor], params: dict[str, np.ndarray],
                  h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss w.r.t. every parameter entry."""
    out = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=np.float64)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn({k: Tensor(v) for k, v in params.items()}).data)
            flat[i] = orig - h
            down = float(loss_fn({k: Tensor(v) for k, v in params.items()}).data)
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = grad
    return out


def max_relative_error(loss_fn: Callable[..., Tensor], params: dict[str, np.ndarray],
                       h: float = 1e-5) -> float:
    """Worst relative disagreement between autodiff and finite differences.

    The denominator is floored at 1e-2 so entries whose true gradient is
    nearly zero are judged on absolute error.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = forward_backward(loss_fn, params)
    numeric = numeric_grads(loss_fn, params, h)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-2)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
