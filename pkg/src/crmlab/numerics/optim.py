from __future__ import annotations

import numpy as np

from crmlab.errors import NonFiniteError


def _check_finite(params):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")


def sgd_step(params, lr: float):
    """value <- value - lr * grad, then zero the gradients.

    All gradients are validated before any value is touched, so a failing
    step leaves the parameters as they were.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    _check_finite(params)
    for p in params:
        p.value -= np.asarray(lr, dtype=p.value.dtype) * p.grad
        p.zero_grad()
    return params


class Adam:
    """Adam with bias correction. Moments are kept per parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params):
        params = list(params)
        _check_finite(params)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in params:
            m = self._m.setdefault(p.name, np.zeros_like(p.value))
            v = self._v.setdefault(p.name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype)
            p.zero_grad()
        return params


def make_optimizer(name: str, lr: float):
    """Return a callable ``step(params)``."""
    if name == "sgd":
        return lambda params: sgd_step(params, lr)
    if name == "adam":
        return Adam(lr).step
    raise ValueError(f"unknown optimizer {name!r} (expected sgd or adam)")
