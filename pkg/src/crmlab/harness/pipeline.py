"""End-to-end experiment: simulate, train, index, evaluate, sweep, trace, report.

Every numeric table is a pure function of the resolved config. Wall-clock
timings go to ``runtime.json`` only, so report tables can be compared
byte for byte across reruns.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from crmlab.datasets import group_histories, split_leave_one_out, write_events
from crmlab.errors import CRMError
from crmlab.harness.config import config_hash, derive_seed, dump_config
from crmlab.harness.evaluate import (
    DailyTrace,
    EvalReport,
    PairedComparison,
    SweepResult,
    condition_trace,
    evaluate,
    paired_comparison,
    sweep_condition,
)
from crmlab.harness.svg import write_line_chart
from crmlab.models import build_model, save_model, train_model
from crmlab.policy import ConditionSpec
from crmlab.retrieval import build_index, save_index
from crmlab.simulator import SessionConfig, WorldConfig, build_world, generate_sessions, save_world

log = logging.getLogger(__name__)


class PipelineError(CRMError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    run_dir: Path
    config_hash: str
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)
    comparisons: dict[str, PairedComparison] = field(default_factory=dict)
    sweeps: dict[str, SweepResult] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)
    trace: DailyTrace | None = None
    timings: dict[str, float] = field(default_factory=dict)
    random_hit: dict[int, float] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path, rows: list[dict]):
    if not rows:
        raise ValueError(f"no rows for {path}")
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    cols = text[0].split("\t")
    return [dict(zip(cols, line.split("\t"))) for line in text[1:] if line]


def _new_run_dir(out_root: Path, h: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = out_root / f"run-{stamp}-{h[:8]}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = Path(f"{base}-{n}")
    path.mkdir(parents=True)
    return path


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(**cfg["world"], seed=derive_seed(cfg["seed"], "world"))


def session_config(cfg: dict) -> SessionConfig:
    return SessionConfig(**cfg["sessions"], seed=derive_seed(cfg["seed"], "sessions"))


def condition_specs(cfg: dict) -> list[ConditionSpec]:
    seed = derive_seed(cfg["seed"], "policy")
    return [ConditionSpec.parse(c, cfg["eval"]["window"], seed) for c in cfg["eval"]["conditions"]]


def run_pipeline(cfg: dict, out_root="runs") -> PipelineResult:
    """Run every stage for a resolved config; returns in-memory results.

    On failure a ``FAILED`` file naming the stage is written next to whatever
    outputs were already produced, and ``PipelineError`` is raised.
    """
    h = config_hash(cfg)
    run_dir = _new_run_dir(Path(out_root), h)
    res = PipelineResult(run_dir, h)
    dump_config(cfg, run_dir / "config.resolved.yaml")
    (run_dir / "config.hash").write_text(h + "\n", encoding="utf-8")
    ecfg = cfg["eval"]
    ks = tuple(ecfg["ks"])

    @contextmanager
    def stage(name):
        log.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            (run_dir / "FAILED").write_text(f"stage: {name}\n{traceback.format_exc()}", encoding="utf-8")
            _write_runtime(run_dir, res.timings)
            raise PipelineError(name, exc) from exc
        res.timings[name] = time.perf_counter() - t0

    with stage("simulate"):
        world = build_world(world_config(cfg))
        save_world(world, run_dir / "world.ckpt")
        events = generate_sessions(world, session_config(cfg))
        write_events(run_dir / "events.tsv", events)

    with stage("split"):
        max_len = cfg["data"]["max_seq_len"]
        train_ex, test_ex = split_leave_one_out(group_histories(events), max_len)
        n_items = world.n_items
        res.random_hit = {k: k / n_items for k in ks}

    eval_rows, cmp_rows = [], []
    for variant in cfg["variants"]:
        vdir = run_dir / variant
        vdir.mkdir()
        with stage(f"train:{variant}"):
            model = build_model(variant, cfg["model"], n_items, world.n_users, max_len,
                                derive_seed(cfg["seed"], f"init:{variant}"))
            t = cfg["train"]
            trace = train_model(model, train_ex, cfg["data"]["batch_size"], max_len, t["epochs"], t["lr"],
                                t["optimizer"], derive_seed(cfg["seed"], "batches"))
            save_model(model, vdir / "model.ckpt")
            res.losses[variant] = trace.epoch_means
            write_tsv(vdir / "loss.tsv", [
                {"epoch": i + 1, "mean_loss": v, "config_hash": h} for i, v in enumerate(trace.epoch_means)
            ])
        with stage(f"index:{variant}"):
            icfg = cfg["index"]
            index = build_index(model.item_vectors(), np.arange(1, n_items + 1), icfg["variant"],
                                icfg["n_clusters"], icfg["n_probe"], derive_seed(cfg["seed"], "index"))
            save_index(index, vdir / "index.bin", {"config_hash": h, "model_variant": variant})
        with stage(f"eval:{variant}"):
            specs = condition_specs(cfg) if model.uses_condition else [None]
            reports = [evaluate(model, index, test_ex, s, world, ks, ecfg["watch_k"], h) for s in specs]
            res.reports[variant] = reports
            eval_rows += [r.row() for r in reports]
            by_label = {r.label: r for r in reports}
            if "max" in by_label and "avg" in by_label:
                cmp = paired_comparison(by_label["max"], by_label["avg"])
                res.comparisons[variant] = cmp
                cmp_rows.append(cmp.row(h))
        if model.uses_condition:
            with stage(f"sweep:{variant}"):
                sw = sweep_condition(model, index, test_ex, ecfg["sweep_grid"], world, ks, ecfg["watch_k"], h)
                res.sweeps[variant] = sw
                write_tsv(run_dir / f"sweep_{variant}.tsv", sw.rows())

    with stage("trace"):
        tc = cfg["trace"]
        res.trace = condition_trace(world, tc["sessions_per_day"], tc["days"], tc["session_len"], tc["n_users"],
                                    tc["window"], session_config(cfg), derive_seed(cfg["seed"], "trace"))
        write_tsv(run_dir / "trace.tsv", res.trace.rows(h))

    with stage("report"):
        write_tsv(run_dir / "eval.tsv", eval_rows)
        if cmp_rows:
            write_tsv(run_dir / "comparison.tsv", cmp_rows)
        write_tsv(run_dir / "summary.tsv", summary_rows(res))
        write_plots(run_dir, res)

    _write_runtime(run_dir, res.timings)
    return res


def _write_runtime(run_dir: Path, timings: dict):
    (run_dir / "runtime.json").write_text(json.dumps({"seconds": timings}, indent=2) + "\n", encoding="utf-8")


def summary_rows(res: PipelineResult) -> list[dict]:
    rows = []

    def add(metric, value):
        rows.append({"metric": metric, "value": value, "config_hash": res.config_hash})

    for k, v in res.random_hit.items():
        add(f"random_hit@{k}", v)
    for variant, reports in res.reports.items():
        for r in reports:
            for k, v in r.hit_rate.items():
                add(f"{variant}/{r.label}/hit@{k}", v)
            add(f"{variant}/{r.label}/watch@{r.watch_k}", r.mean_watch)
    for variant, c in res.comparisons.items():
        add(f"{variant}/max_vs_avg/t_stat", c.t_stat)
        add(f"{variant}/max_vs_avg/p_value", c.p_value)
    for variant, sw in res.sweeps.items():
        add(f"{variant}/sweep/spearman", sw.spearman)
    if res.trace is not None:
        gaps = [m - a for m, a in zip(res.trace.mean_max, res.trace.mean_avg)]
        add("trace/min_max_minus_avg", min(gaps))
        add("trace/correlation", res.trace.correlation)
    return rows


def write_plots(run_dir: Path, res: PipelineResult):
    if res.losses:
        write_line_chart(
            run_dir / "loss.svg",
            {v: (list(range(1, len(l) + 1)), l) for v, l in res.losses.items()},
            "Training loss", "epoch", "mean in-batch softmax loss",
        )
    if res.sweeps:
        write_line_chart(
            run_dir / "sweep.svg",
            {v: (sw.grid, [r.mean_watch for r in sw.reports]) for v, sw in res.sweeps.items()},
            "Condition sweep", "condition (seconds)", "mean oracle watch time of top-K (s)", log_x=True,
        )
    if res.trace is not None:
        t = res.trace
        write_line_chart(
            run_dir / "trace.svg",
            {"max": (t.hours, t.mean_max), "avg": (t.hours, t.mean_avg)},
            "Daily condition trace", "hour of day", "mean condition (s)",
        )
