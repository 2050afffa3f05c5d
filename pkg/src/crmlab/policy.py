"""Inference-time condition selection from a user's recent watch times."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crmlab.errors import ConfigError

MODES = ("explicit", "avg", "max", "multiplexed")


@dataclass(frozen=True)
class ConditionSpec:
    mode: str
    value: float | None = None  # explicit mode only
    p: float = 0.3  # probability of picking max in multiplexed mode
    window_n: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"condition mode must be one of {MODES}, got {self.mode!r}")
        if self.window_n < 1:
            raise ConfigError("window_n must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.mode == "explicit" and (self.value is None or self.value < 0):
            raise ConfigError("explicit mode needs a non-negative value")

    @classmethod
    def parse(cls, text: str, window_n: int = 32, rng_seed: int = 0) -> "ConditionSpec":
        """Parse the CLI form: ``avg``, ``max``, ``mux:<p>`` or ``value:<seconds>``."""
        text = text.strip()
        try:
            if text in ("avg", "max"):
                return cls(text, window_n=window_n, rng_seed=rng_seed)
            if text.startswith("mux:"):
                return cls("multiplexed", p=float(text[4:]), window_n=window_n, rng_seed=rng_seed)
            if text.startswith("value:"):
                return cls("explicit", value=float(text[6:]), window_n=window_n, rng_seed=rng_seed)
        except ValueError as exc:
            raise ConfigError(f"bad condition {text!r}: {exc}") from None
        raise ConfigError(f"bad condition {text!r}; expected avg, max, mux:<p> or value:<seconds>")

    def label(self) -> str:
        if self.mode == "explicit":
            return f"value:{self.value:g}"
        if self.mode == "multiplexed":
            return f"mux:{self.p:g}"
        return self.mode

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def window_stats(recent_watch_times, window_n: int) -> tuple[float, float]:
    """(average, maximum) over the trailing ``min(window_n, len)`` values."""
    if len(recent_watch_times) == 0:
        raise ValueError("empty watch history: no condition can be derived (fall back to the baseline model)")
    total = 0.0
    best = 0.0
    window = list(recent_watch_times)[-window_n:]
    for w in window:
        total += w
        best = max(best, w)
    return total / len(window), best


def select_condition(spec: ConditionSpec, recent_watch_times, rng: np.random.Generator | None = None) -> float:
    """Condition value in seconds.

    Multiplexed mode draws one uniform number per call and returns the window
    maximum when it falls below ``p``, the window average otherwise.
    """
    if spec.mode == "explicit":
        return float(spec.value)
    avg, mx = window_stats(recent_watch_times, spec.window_n)
    if spec.mode == "avg":
        return avg
    if spec.mode == "max":
        return mx
    if rng is None:
        raise ValueError("multiplexed mode needs an rng")
    return mx if rng.random() < spec.p else avg
