import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import yaml

from crmlab.datasets import TrainExample, group_histories, split_leave_one_out
from crmlab.errors import ConfigError, ShapeError
from crmlab.harness.config import DEFAULTS, config_hash, derive_seed, load_config, resolve_config
from crmlab.harness.evaluate import condition_trace, evaluate, paired_comparison, sweep_condition
from crmlab.harness.pipeline import PipelineError, read_tsv, run_pipeline
from crmlab.harness.svg import line_chart
from crmlab.models import build_model
from crmlab.policy import ConditionSpec
from crmlab.retrieval import build_index
from crmlab.simulator import SessionConfig, WorldConfig, build_world, generate_sessions

TINY = {
    "seed": 5,
    "variants": ["baseline", "crm_dnn", "crm_dt"],
    "world": {"n_users": 40, "n_items": 120},
    "sessions": {"sessions_per_user": 2, "session_len": 5, "candidate_size": 60},
    "data": {"max_seq_len": 6, "batch_size": 16},
    "model": {"dim": 8, "hidden": [8], "output_dim": 8, "n_layers": 1},
    "train": {"epochs": 1},
    "eval": {"sweep_grid": [4, 32, 256]},
    "trace": {"n_users": 10, "sessions_per_day": 6, "session_len": 3},
}


@pytest.fixture(scope="module")
def setup():
    world = build_world(WorldConfig(n_users=60, n_items=300, seed=1))
    events = generate_sessions(world, SessionConfig(sessions_per_user=2, session_len=6, seed=1))
    _, test = split_leave_one_out(group_histories(events), 8)
    model = build_model("crm_dnn", DEFAULTS["model"], 300, 60, 8, 0)
    index = build_index(model.item_vectors(), np.arange(1, 301))
    return world, test, model, index


# --- config -------------------------------------------------------------------------

@pytest.mark.parametrize("missing", ["seed", "variants"])
def test_missing_key_is_named(missing):
    raw = {"seed": 1, "variants": ["baseline"]}
    del raw[missing]
    with pytest.raises(ConfigError, match=missing):
        resolve_config(raw)


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="bogus"):
        resolve_config({"seed": 1, "variants": ["baseline"], "bogus": 1})
    with pytest.raises(ConfigError, match="lrr"):
        resolve_config({"seed": 1, "variants": ["baseline"], "train": {"lrr": 1}})
    with pytest.raises(ConfigError, match="crm_xx"):
        resolve_config({"seed": 1, "variants": ["crm_xx"]})


def test_defaults_fill_in(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 2, "variants": "crm_dt", "train": {"epochs": 3}}))
    cfg = load_config(path)
    assert cfg["variants"] == ["crm_dt"]
    assert cfg["train"]["epochs"] == 3 and cfg["train"]["lr"] == DEFAULTS["train"]["lr"]
    assert cfg["world"] == DEFAULTS["world"]


def test_hash_and_seeds_stable():
    a = resolve_config({"seed": 1, "variants": ["baseline"]})
    b = resolve_config({"variants": ["baseline"], "seed": 1})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(resolve_config({"seed": 2, "variants": ["baseline"]}))
    assert derive_seed(1, "world") == derive_seed(1, "world") != derive_seed(1, "sessions")


# --- evaluate -----------------------------------------------------------------------

def test_target_only_index_hits_everything(setup):
    world, test, model, _ = setup
    targets = np.array(sorted({ex.target_item for ex in test}))
    # one-hot item vectors; each user vector points at its own target
    vecs = np.eye(len(targets), dtype=np.float32)
    index = build_index(vecs, targets)
    pos = {t: i for i, t in enumerate(targets)}
    users = np.stack([vecs[pos[ex.target_item]] for ex in test])
    rep = evaluate(None, index, test, None, world, ks=(1, 10), watch_k=1, user_vectors=users)
    assert rep.hit_rate == {1: 1.0, 10: 1.0}


def test_random_vectors_match_null_rate(setup):
    world, test, _, _ = setup
    rng = np.random.default_rng(0)
    n_items = 300
    index = build_index(rng.standard_normal((n_items, 16)).astype(np.float32), np.arange(1, n_items + 1))
    # several independent draws pooled to tighten the estimate
    hits, total = 0.0, 0
    for _ in range(20):
        users = rng.standard_normal((len(test), 16))
        rep = evaluate(None, index, test, None, world, ks=(50,), user_vectors=users)
        hits += rep.hit_rate[50] * len(test)
        total += len(test)
    p = 50 / n_items
    assert abs(hits / total - p) <= 3 * math.sqrt(p * (1 - p) / total)


def test_dim_mismatch_raises_before_queries(setup):
    world, test, model, _ = setup
    index = build_index(np.ones((10, model.output_dim + 1), np.float32))
    with pytest.raises(ShapeError):
        evaluate(model, index, test, ConditionSpec("avg"), world)


def test_report_fields(setup):
    world, test, model, index = setup
    rep = evaluate(model, index, test, ConditionSpec("max"), world, config_hash="abc")
    assert all(0 <= v <= 1 for v in rep.hit_rate.values())
    assert rep.n_users == len(test) and len(rep.per_user_watch) == len(test)
    assert rep.label == "max" and rep.row()["config_hash"] == "abc"
    assert rep.mean_condition == pytest.approx(np.mean([max(ex.watch_times[-32:]) for ex in test]))


def test_baseline_ignores_condition(setup):
    world, test, _, _ = setup
    base = build_model("baseline", DEFAULTS["model"], 300, 60, 8, 0)
    index = build_index(base.item_vectors(), np.arange(1, 301))
    a = evaluate(base, index, test, ConditionSpec("max"), world)
    b = evaluate(base, index, test, None, world)
    assert a.label == "none" and np.array_equal(a.per_user_watch, b.per_user_watch)


def test_single_point_sweep_equals_explicit_eval(setup):
    world, test, model, index = setup
    sw = sweep_condition(model, index, test, [64.0], world)
    ev = evaluate(model, index, test, ConditionSpec("explicit", value=64.0), world)
    assert sw.reports[0].row() == ev.row()


def test_sweep_rows_follow_grid(setup):
    world, test, model, index = setup
    sw = sweep_condition(model, index, test, [2, 16, 128], world)
    assert [r["condition"] for r in sw.rows()] == [2.0, 16.0, 128.0]
    assert [r["label"] for r in sw.rows()] == ["value:2", "value:16", "value:128"]
    with pytest.raises(ValueError):
        sweep_condition(model, index, test, [], world)
    with pytest.raises(ValueError):
        sweep_condition(model, index, test, [8, 4], world)


def test_paired_comparison_direction(setup):
    world, test, model, index = setup
    hi = evaluate(model, index, test, ConditionSpec("max"), world)
    cmp = paired_comparison(hi, hi)
    assert cmp.mean_diff == 0.0


def test_condition_trace_shape(setup):
    world = setup[0]
    tr = condition_trace(world, sessions_per_day=8, days=2, session_len=4, n_users=30, window=16)
    assert len(tr.hours) == 8 and tr.hours[1] == 3.0
    assert all(c == 30 for c in tr.counts)
    assert all(m >= a for m, a in zip(tr.mean_max, tr.mean_avg))
    with pytest.raises(ValueError):
        condition_trace(world, days=1)


def test_svg_is_well_formed():
    doc = line_chart({"a": ([1, 2, 3], [1.0, 4.0, 2.0]), "b & c": ([1, 3], [0.5, 0.7])}, "T<1>", "x", "y")
    root = ET.fromstring(doc)
    assert root.tag.endswith("svg")
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


# --- pipeline -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    return run_pipeline(resolve_config(TINY), tmp_path_factory.mktemp("runs"))


def test_pipeline_writes_artifacts(tiny_run):
    d = tiny_run.run_dir
    for name in ("config.resolved.yaml", "world.ckpt", "world.ckpt.meta.txt", "events.tsv", "eval.tsv",
                 "comparison.tsv", "sweep_crm_dnn.tsv", "sweep_crm_dt.tsv", "trace.tsv", "summary.tsv",
                 "runtime.json", "loss.svg", "sweep.svg", "trace.svg"):
        assert (d / name).exists(), name
    for v in TINY["variants"]:
        for name in ("model.ckpt", "index.bin", "loss.tsv"):
            assert (d / v / name).exists()
    assert not (d / "FAILED").exists()


def test_every_row_carries_config_hash(tiny_run):
    d = tiny_run.run_dir
    for name in ("eval.tsv", "comparison.tsv", "sweep_crm_dt.tsv", "trace.tsv", "summary.tsv", "baseline/loss.tsv"):
        rows = read_tsv(d / name)
        assert rows and all(r["config_hash"] == tiny_run.config_hash for r in rows)


def test_eval_table_covers_variants(tiny_run):
    rows = read_tsv(tiny_run.run_dir / "eval.tsv")
    labels = {(r["variant"], r["label"]) for r in rows}
    assert ("baseline", "none") in labels
    for v in ("crm_dnn", "crm_dt"):
        assert {(v, "avg"), (v, "max"), (v, "mux:0.3")} <= labels


def test_failed_stage_is_marked(tmp_path):
    cfg = resolve_config({**TINY, "variants": ["baseline"], "index": {"variant": "ivf", "n_clusters": 500}})
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg, tmp_path)
    assert err.value.stage == "index:baseline"
    run_dir = next(tmp_path.iterdir())
    assert (run_dir / "FAILED").read_text().startswith("stage: index:baseline")
    assert (run_dir / "baseline" / "model.ckpt").exists()
