from __future__ import annotations

import math

import numpy as np

from crmlab.errors import NonFiniteError


def _call(loss_fn) -> float:
    loss = float(loss_fn())
    if not math.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    return loss


def grad_check(params, loss_fn, h: float = 1e-3, n_samples: int = 100, seed: int = 0) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must return the scalar loss and accumulate the analytic
    gradient into each ``Param.grad``. Returns the maximum over the sampled
    coordinates of ``|analytic - numeric| / max(1, |numeric|)``. The step is
    measured from the stored values, so float32 rounding of ``x +- h`` does not
    bias the estimate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    _call(loss_fn)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[pi])
        values = params[pi].value.reshape(-1)
        orig = values[idx].copy()
        values[idx] = orig + h
        x_plus = float(values[idx])
        l_plus = _call(loss_fn)
        values[idx] = orig - h
        x_minus = float(values[idx])
        l_minus = _call(loss_fn)
        values[idx] = orig
        numeric = (l_plus - l_minus) / (x_plus - x_minus)
        a = float(analytic[pi].reshape(-1)[idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))

    for p in params:
        p.zero_grad()
    return worst
