"""Command-line entry point: ``crmlab <subcommand>``.

BLAS thread counts are pinned to 1 before numpy is imported so runs are
single-threaded and bitwise reproducible.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

log = logging.getLogger("crmlab")


def _load_cfg(path):
    from crmlab.harness.config import load_config

    return load_config(path)


def _test_split(events_path, world, max_seq_len):
    from crmlab.datasets import group_histories, load_events, split_leave_one_out

    events = load_events(events_path, world.n_users, world.n_items)
    return split_leave_one_out(group_histories(events), max_seq_len)


def _max_seq_len(model, fallback=32):
    return getattr(model.config, "max_seq_len", fallback)


def cmd_run(args):
    from crmlab.harness.pipeline import run_pipeline

    res = run_pipeline(_load_cfg(args.config), args.out)
    print(res.run_dir)
    return 0


def cmd_simulate(args):
    from crmlab.datasets import write_events
    from crmlab.harness.pipeline import session_config, world_config
    from crmlab.simulator import build_world, generate_sessions, save_world

    cfg = _load_cfg(args.config)
    os.makedirs(args.out, exist_ok=True)
    world = build_world(world_config(cfg))
    save_world(world, os.path.join(args.out, "world.ckpt"))
    events = generate_sessions(world, session_config(cfg))
    write_events(os.path.join(args.out, "events.tsv"), events)
    print(f"{len(events)} events for {world.n_users} users written to {args.out}")
    return 0


def cmd_train(args):
    from crmlab.datasets import group_histories, load_events, split_leave_one_out
    from crmlab.harness.config import derive_seed
    from crmlab.harness.pipeline import world_config
    from crmlab.models import build_model, save_model, train_model

    cfg = _load_cfg(args.config)
    wc = world_config(cfg)
    max_len = cfg["data"]["max_seq_len"]
    events = load_events(args.events, wc.n_users, wc.n_items)
    train_ex, _ = split_leave_one_out(group_histories(events), max_len)
    model = build_model(args.variant, cfg["model"], wc.n_items, wc.n_users, max_len,
                        derive_seed(cfg["seed"], f"init:{args.variant}"))
    t = cfg["train"]
    trace = train_model(model, train_ex, cfg["data"]["batch_size"], max_len, args.epochs or t["epochs"], t["lr"],
                        t["optimizer"], derive_seed(cfg["seed"], "batches"))
    save_model(model, args.out)
    for i, v in enumerate(trace.epoch_means, 1):
        print(f"epoch {i}\tloss {v:.4f}")
    return 0


def cmd_build_index(args):
    import numpy as np

    from crmlab.models import load_model
    from crmlab.retrieval import build_index, save_index

    model = load_model(args.model)
    vecs = model.item_vectors()
    index = build_index(vecs, np.arange(1, len(vecs) + 1), args.variant, args.n_clusters, args.n_probe, args.seed)
    save_index(index, args.out, {"model_variant": model.variant})
    print(f"{args.variant} index over {index.n_items} items (dim {index.dim}) written to {args.out}")
    return 0


def _model_index_world(args):
    from crmlab.models import load_model
    from crmlab.retrieval import load_index
    from crmlab.simulator import load_world

    return load_model(args.model), load_index(args.index)[0], load_world(args.world)


def cmd_eval(args):
    from crmlab.harness.evaluate import evaluate
    from crmlab.policy import ConditionSpec

    model, index, world = _model_index_world(args)
    _, test = _test_split(args.events, world, _max_seq_len(model))
    spec = ConditionSpec.parse(args.condition, args.window, args.seed)
    rep = evaluate(model, index, test, spec, world, args.k, args.watch_k)
    for key, value in rep.row().items():
        print(f"{key}\t{value}")
    return 0


def cmd_sweep(args):
    from crmlab.harness.evaluate import sweep_condition
    from crmlab.harness.pipeline import write_tsv
    from crmlab.harness.svg import write_line_chart

    model, index, world = _model_index_world(args)
    _, test = _test_split(args.events, world, _max_seq_len(model))
    grid = [float(x) for x in args.grid.split(",") if x.strip()]
    sw = sweep_condition(model, index, test, grid, world, args.k, args.watch_k)
    write_tsv(args.out, sw.rows())
    if args.plot:
        write_line_chart(args.plot, {sw.variant: (sw.grid, [r.mean_watch for r in sw.reports])},
                         "Condition sweep", "condition (seconds)", "mean oracle watch time of top-K (s)", log_x=True)
    for g, r in zip(sw.grid, sw.reports):
        print(f"{g:g}\t{r.mean_watch:.3f}")
    print(f"spearman\t{sw.spearman:.4f}")
    return 0


def cmd_report(args):
    from pathlib import Path

    from crmlab.harness.pipeline import read_tsv

    run = Path(args.run)
    failed = run / "FAILED"
    if failed.exists():
        print(failed.read_text().splitlines()[0], file=sys.stderr)
        return 1
    for row in read_tsv(run / "summary.tsv"):
        print(f"{row['metric']}\t{row['value']}")
    return 0


def cmd_retrieve(args):
    import numpy as np

    from crmlab.datasets import load_events
    from crmlab.errors import DataError
    from crmlab.models import load_model
    from crmlab.policy import ConditionSpec, select_condition
    from crmlab.retrieval import load_index, search

    model = load_model(args.model)
    index, _ = load_index(args.index)
    events = [e for e in load_events(args.events) if e.user_id == args.user]
    if not events:
        raise DataError(f"user {args.user} has no history; serve the unconditioned baseline model instead")
    max_len = _max_seq_len(model)
    recent = events[-max_len:]
    ids = np.array([[e.item_id for e in recent]])
    watch = np.array([[e.watch_time for e in recent]], dtype=np.float32)
    spec = ConditionSpec.parse(args.condition, args.window, args.seed)
    cond = select_condition(spec, [e.watch_time for e in events], spec.make_rng())
    if model.variant == "crm_dt":
        u = model.user_vectors(ids, watch, np.array([cond]), np.array([args.user]))[0]
    elif model.uses_condition:
        u = model.user_vectors(ids, watch, np.array([cond]))[0]
    else:
        u = model.user_vectors(ids, watch)[0]
    res = search(index, u, args.k)
    print(f"# user {args.user} condition {cond:.3f}s ({spec.label()})")
    for rank, (i, s) in enumerate(zip(res.ids, res.scores), 1):
        print(f"{rank}\t{i}\t{s:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from crmlab.harness.config import describe_defaults

    p = argparse.ArgumentParser(
        prog="crmlab",
        description="Watch-time controllable retrieval experiments on a simulated short-video world.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="full pipeline into a timestamped run directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="runs", help="parent directory for run directories")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="build the world and write its event log")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train one variant on an event log")
    s.add_argument("--config", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--variant", required=True, choices=["baseline", "crm_dnn", "crm_dt"])
    s.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-index", help="cache item vectors of a model in a search index")
    s.add_argument("--model", required=True)
    s.add_argument("--variant", default="exact", choices=["exact", "ivf"])
    s.add_argument("--n-clusters", type=int, default=64)
    s.add_argument("--n-probe", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_index)

    def eval_args(s):
        s.add_argument("--model", required=True)
        s.add_argument("--index", required=True)
        s.add_argument("--world", required=True)
        s.add_argument("--events", required=True)
        s.add_argument("--k", type=int, nargs="+", default=[10, 50, 100], help="hit-rate cut-offs")
        s.add_argument("--watch-k", type=int, default=50)

    s = sub.add_parser("eval", help="hit rate and oracle watch time on held-out events")
    eval_args(s)
    s.add_argument("--condition", default="avg", help="avg | max | mux:<p> | value:<seconds>")
    s.add_argument("--window", type=int, default=32)
    s.add_argument("--seed", type=int, default=0, help="rng seed for mux conditions")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate a grid of explicit condition values")
    eval_args(s)
    s.add_argument("--grid", default="4,8,16,32,64,128,256", help="comma-separated ascending seconds")
    s.add_argument("--out", required=True, help="TSV output")
    s.add_argument("--plot", default=None, help="optional SVG output")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="print the summary table of a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("retrieve", help="top-K items for one user")
    s.add_argument("--model", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--condition", default="avg", help="avg | max | mux:<p> | value:<seconds>")
    s.add_argument("--window", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from crmlab.errors import CRMError

    try:
        return args.func(args)
    except (CRMError, ValueError, OSError, KeyError) as exc:
        print(f"crmlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
