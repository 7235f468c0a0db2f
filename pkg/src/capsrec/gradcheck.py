"""Central finite-difference verification of hand-derived gradients.

Every analytic gradient in this package is validated against central
differences; there is no autodiff tape to fall back on. The checker
perturbs parameters in place and restores them, so the loss function may
close over the same arrays it receives.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericalError

DEFAULT_EPSILON = 1e-5


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn must be deterministic given the parameter values. For each entry
    of each parameter the checker evaluates loss at +/- epsilon and compares
    (f(x+e) - f(x-e)) / 2e against the supplied analytic gradient using
    |g_a - g_c| / max(1e-8, |g_a| + |g_c|).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ConfigError(f"finite_difference_check: epsilon {epsilon} outside [1e-7, 1e-3]")
    worst = 0.0
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ConfigError(f"gradient for {name!r} has shape {grad.shape}, parameter {param.shape}")
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            up = loss_fn(params)
            flat[i] = saved - epsilon
            down = loss_fn(params)
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"non-finite loss while probing {name}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst
