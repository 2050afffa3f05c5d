"""Offline evaluation against the simulator's watch-time oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from crmlab.datasets import collate, group_histories
from crmlab.errors import ShapeError
from crmlab.policy import ConditionSpec, select_condition, window_stats
from crmlab.retrieval import ItemIndex, search
from crmlab.simulator import SessionConfig, SimWorld, expected_watch_matrix, generate_sessions


@dataclass
class EvalReport:
    label: str
    variant: str
    n_users: int
    hit_rate: dict[int, float]
    hit_se: dict[int, float]
    watch_k: int
    mean_watch: float  # mean oracle expected watch time over each user's top watch_k
    watch_se: float
    mean_condition: float
    config_hash: str = ""
    user_ids: np.ndarray = field(default=None, repr=False)
    per_user_watch: np.ndarray = field(default=None, repr=False)
    per_user_hits: dict[int, np.ndarray] = field(default=None, repr=False)
    conditions: np.ndarray = field(default=None, repr=False)

    def row(self) -> dict:
        out = {"label": self.label, "variant": self.variant, "n_users": self.n_users}
        for k in sorted(self.hit_rate):
            out[f"hit@{k}"] = self.hit_rate[k]
            out[f"hit@{k}_se"] = self.hit_se[k]
        out[f"watch@{self.watch_k}"] = self.mean_watch
        out[f"watch@{self.watch_k}_se"] = self.watch_se
        out["mean_condition"] = self.mean_condition
        out["config_hash"] = self.config_hash
        return out


def _se(x: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))


def user_vectors_for(model, examples, conditions, batch_size: int = 256) -> np.ndarray:
    """User vectors for test examples, in order, with one condition per example."""
    max_len = max(len(ex.item_ids) for ex in examples)
    if hasattr(model, "config") and hasattr(model.config, "max_seq_len"):
        max_len = model.config.max_seq_len
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        batch = collate(chunk, max_len)
        conds = None if conditions is None else np.asarray(conditions[s:s + batch_size], dtype=np.float64)
        out.append(model.batch_user_vectors(batch, conds))
    return np.concatenate(out, axis=0)


def evaluate(model, index: ItemIndex, test_examples, spec: ConditionSpec | None, world: SimWorld,
             ks=(10, 50, 100), watch_k: int = 50, config_hash: str = "", user_vectors=None) -> EvalReport:
    """Retrieve for every held-out example and score the result.

    For each example the policy picks a condition from its history (skipped
    for models without a condition input), the user vector is searched
    against ``index``, and the held-out item's rank and the oracle expected
    watch time of the top ``watch_k`` items are recorded. ``user_vectors``
    overrides the model forward pass when given.
    """
    if model is not None and model.output_dim != index.dim:
        raise ShapeError(f"model output dim {model.output_dim} != index dim {index.dim}")
    if not test_examples:
        raise ValueError("no test examples")
    ks = tuple(sorted(int(k) for k in ks))
    uses_cond = model is not None and model.uses_condition and spec is not None
    conds = None
    if uses_cond:
        rng = spec.make_rng()
        conds = np.array([select_condition(spec, ex.watch_times, rng) for ex in test_examples])
    if user_vectors is None:
        user_vectors = user_vectors_for(model, test_examples, conds)
    user_vectors = np.asarray(user_vectors)
    if user_vectors.shape != (len(test_examples), index.dim):
        raise ShapeError(f"user vectors {user_vectors.shape} do not match ({len(test_examples)}, {index.dim})")
    depth = max(max(ks), watch_k)
    hits = {k: np.zeros(len(test_examples)) for k in ks}
    watch = np.zeros(len(test_examples))
    users = np.array([ex.user_id for ex in test_examples], dtype=np.int64)
    for r, ex in enumerate(test_examples):
        res = search(index, user_vectors[r], depth)
        ranked = res.ids
        for k in ks:
            hits[k][r] = float(ex.target_item in ranked[:k])
        top = ranked[:watch_k]
        watch[r] = float(expected_watch_matrix(world, [ex.user_id], top)[0].mean())
    label = "none" if not uses_cond else spec.label()
    return EvalReport(
        label=label,
        variant=getattr(model, "variant", "vectors"),
        n_users=len(test_examples),
        hit_rate={k: float(hits[k].mean()) for k in ks},
        hit_se={k: _se(hits[k]) for k in ks},
        watch_k=watch_k,
        mean_watch=float(watch.mean()),
        watch_se=_se(watch),
        mean_condition=float(conds.mean()) if conds is not None else float("nan"),
        config_hash=config_hash,
        user_ids=users,
        per_user_watch=watch,
        per_user_hits=hits,
        conditions=conds,
    )


@dataclass
class SweepResult:
    variant: str
    grid: list[float]
    reports: list[EvalReport]
    spearman: float
    spearman_p: float

    def rows(self) -> list[dict]:
        out = []
        for value, rep in zip(self.grid, self.reports):
            row = {"condition": value}
            row.update(rep.row())
            out.append(row)
        return out


def sweep_condition(model, index: ItemIndex, test_examples, grid, world: SimWorld, ks=(10, 50, 100),
                    watch_k: int = 50, config_hash: str = "") -> SweepResult:
    """One evaluation per explicit condition value, in grid order."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("condition grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("condition grid must be ascending")
    reports = [
        evaluate(model, index, test_examples, ConditionSpec("explicit", value=g), world, ks, watch_k, config_hash)
        for g in grid
    ]
    if len(grid) > 1:
        res = stats.spearmanr(grid, [r.mean_watch for r in reports])
        rho, p = float(res.statistic), float(res.pvalue)
    else:
        rho, p = float("nan"), float("nan")
    return SweepResult(getattr(model, "variant", "vectors"), grid, reports, rho, p)


@dataclass
class PairedComparison:
    variant: str
    high: str
    low: str
    n_users: int
    mean_high: float
    mean_low: float
    mean_diff: float
    t_stat: float
    p_value: float

    def row(self, config_hash: str = "") -> dict:
        return {
            "variant": self.variant,
            "high": self.high,
            "low": self.low,
            "n_users": self.n_users,
            "mean_high": self.mean_high,
            "mean_low": self.mean_low,
            "mean_diff": self.mean_diff,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "config_hash": config_hash,
        }


def paired_comparison(high: EvalReport, low: EvalReport) -> PairedComparison:
    """One-sided paired t-test that ``high`` retrieves longer expected watch time than ``low``."""
    if not np.array_equal(high.user_ids, low.user_ids):
        raise ValueError("reports cover different users")
    res = stats.ttest_rel(high.per_user_watch, low.per_user_watch, alternative="greater")
    return PairedComparison(
        high.variant,
        high.label,
        low.label,
        high.n_users,
        high.mean_watch,
        low.mean_watch,
        float((high.per_user_watch - low.per_user_watch).mean()),
        float(res.statistic),
        float(res.pvalue),
    )


# --- daily condition trace --------------------------------------------------------------

@dataclass
class DailyTrace:
    hours: list[float]
    mean_max: list[float]
    mean_avg: list[float]
    counts: list[int]
    correlation: float

    def rows(self, config_hash: str = "") -> list[dict]:
        return [
            {"hour": h, "max_condition": m, "avg_condition": a, "n": n, "config_hash": config_hash}
            for h, m, a, n in zip(self.hours, self.mean_max, self.mean_avg, self.counts)
        ]


def condition_trace(world: SimWorld, sessions_per_day: int = 24, days: int = 2, session_len: int = 4,
                    n_users: int = 200, window: int = 32, base: SessionConfig | None = None,
                    seed: int = 0) -> DailyTrace:
    """Per-hour mean of the max and avg conditions a request would receive.

    A separate multi-day log is simulated with one session per time bucket.
    At the start of every session on the final day the policy window (the
    user's trailing ``window`` watch times) is summarized both ways, and the
    results are averaged over users per hour.
    """
    if days < 2:
        raise ValueError("days must be >= 2 so every measured window is full of history")
    base = base or SessionConfig()
    cfg = SessionConfig(
        sessions_per_user=days * sessions_per_day,
        session_len=session_len,
        temperature=base.temperature,
        candidate_size=base.candidate_size,
        sigma=base.sigma,
        daily_amplitude=base.daily_amplitude,
        sessions_per_day=sessions_per_day,
        seed=seed,
    )
    users = range(min(n_users, world.n_users))
    histories = group_histories(generate_sessions(world, cfg, users))
    first = (days - 1) * sessions_per_day
    sums_max = np.zeros(sessions_per_day)
    sums_avg = np.zeros(sessions_per_day)
    counts = np.zeros(sessions_per_day, dtype=np.int64)
    for h in histories:
        watch = h.watch_times
        for s in range(first, days * sessions_per_day):
            prior = watch[: s * session_len]
            avg, mx = window_stats(prior, window)
            b = s % sessions_per_day
            sums_max[b] += mx
            sums_avg[b] += avg
            counts[b] += 1
    mean_max = sums_max / counts
    mean_avg = sums_avg / counts
    corr = float(stats.pearsonr(mean_max, mean_avg).statistic) if sessions_per_day > 2 else float("nan")
    hours = [24.0 * b / sessions_per_day for b in range(sessions_per_day)]
    return DailyTrace(hours, mean_max.tolist(), mean_avg.tolist(), counts.tolist(), corr)
