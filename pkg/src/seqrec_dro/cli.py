"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 child-stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHILD = 0, 2, 3, 4, 5


def cmd_prepare(args) -> int:
    from .data import prepare

    dataset = prepare(args.dataset, args.input, args.core, args.dedup)
    digest = dataset.save(args.out)
    stats = {**dataset.stats(), "dataset_hash": digest, "dataset": args.dataset, "core_k": args.core,
             "dedup": args.dedup, "input": str(args.input)}
    (Path(args.out) / "manifest.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    print(json.dumps(stats))
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .data import Dataset, build_sequences
    from .groups import annotate

    seqs = build_sequences(Dataset.load(args.data))
    assignment = annotate(seqs, args.scheme, args.split, args.split_seq or args.split,
                          args.interpretation, args.popular_fraction)
    assignment.save(args.out, seqs)
    print(json.dumps({a: assignment.usplit(a) for a in assignment.axes}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_run_config
    from .train import train_run

    run = load_run_config(args.config, args.set)
    manifest = train_run(run)
    print(json.dumps({k: manifest[k] for k in ("checkpoint", "best_epoch", "best_val_ndcg")}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .config import load_grid, load_run_config
    from .train import SweepSpec, sweep

    run = load_run_config(args.config, args.set)
    param, values = load_grid(args.grid)
    summary = sweep(SweepSpec(run, param, values), jobs=args.jobs)
    print(json.dumps({"selected": summary["selected"], "scores": summary["scores"]}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import Dataset, build_sequences
    from .groups import GroupAssignment, file_hash
    from .model import load_checkpoint
    from .pipeline import evaluate_checkpoint

    _, manifest = load_checkpoint(args.checkpoint)
    data_dir = args.data or manifest["extra"].get("dataset_dir")
    if not data_dir:
        raise ConfigError("checkpoint does not record its dataset; pass --data")
    dataset = Dataset.load(data_dir)
    assignment = GroupAssignment.load(args.groups) if args.groups else None
    report = evaluate_checkpoint(
        args.checkpoint, build_sequences(dataset), assignment, args.split, args.k, args.exclude_seen,
        expected_dataset_hash=dataset.content_hash(),
        expected_groups_hash=file_hash(args.groups) if args.groups else None,
    )
    report.meta["method"] = args.method or Path(args.checkpoint).parent.name
    out = Path(args.out)
    report.save(out / "report.json", include_users=not args.no_per_user)
    print(json.dumps({"overall": report.overall, "per_group": report.per_group}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import MetricReport
    from .groups import GroupAssignment
    from .report import percent_increase_report, results_table

    reports = {}
    for run_dir in args.runs:
        path = Path(run_dir)
        path = path / "report.json" if path.is_dir() else path
        if not path.exists():
            raise DataError(f"no report.json under {run_dir}")
        rep = MetricReport.load(path)
        reports[rep.meta.get("method") or path.parent.name] = rep
    assignment = GroupAssignment.load(args.groups) if args.groups else None
    results_table(reports, args.baseline, args.out, assignment)
    percent_increase_report(reports, args.baseline, args.out, assignment)
    print(f"wrote {args.out}/table.csv, percent_increase.csv, percent_increase.svg")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .config import ExperimentConfig
    from .pipeline import STAGES, run_pipeline

    cfg = ExperimentConfig.load(args.config, args.set)
    stages = STAGES if args.stages == "all" else [s.strip() for s in args.stages.split(",") if s.strip()]
    status = run_pipeline(cfg, stages, args.out, force=args.force, jobs=args.jobs)
    if status and all(v == "up-to-date" for v in status.values()):
        print("up-to-date")
    else:
        print(json.dumps(status))
    return EXIT_OK


def cmd_reproduce_table(args) -> int:
    from .config import ExperimentConfig
    from .pipeline import reproduce_table

    cfg = ExperimentConfig.load(args.config, args.set)
    out = reproduce_table(cfg, args.table, args.out, force=args.force, jobs=args.jobs)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import SyntheticConfig, write_events

    cfg = SyntheticConfig(n_users=args.users, minority_fraction=args.minority_fraction, seed=args.seed)
    kinds = write_events(cfg, args.out)
    print(json.dumps({"users": len(kinds), "minority": sum(k == "minority" for k in kinds.values())}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqrec-dro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("prepare", help="parse a raw log, core-filter it, write the dataset artifact")
    sp.add_argument("--dataset", choices=["retailrocket", "ml1m"], required=True)
    sp.add_argument("--input", required=True, help="events.csv or ratings.dat")
    sp.add_argument("--core", type=int, default=5, help="core-k threshold (default 5)")
    sp.add_argument("--dedup", action="store_true",
                    help="keep only the first event of each (user, item) pair before filtering")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("annotate", help="assign users to popularity / sequence-length groups")
    sp.add_argument("--scheme", choices=["pop", "seq", "intersect"], required=True)
    sp.add_argument("--split", choices=["33", "2060", "1080"], required=True,
                    help="quantile split (popularity split under intersect)")
    sp.add_argument("--split-seq", choices=["33", "2060", "1080"],
                    help="sequence-length split under intersect (default: --split)")
    sp.add_argument("--interpretation", choices=["dsplit", "usplit"], default="dsplit",
                    help="split fractions are shares of training interactions (dsplit) or of users")
    sp.add_argument("--popular-fraction", type=float, default=0.2)
    sp.add_argument("--data", required=True, help="dataset directory from 'prepare'")
    sp.add_argument("--out", required=True, help="output group file (JSON)")
    sp.set_defaults(func=cmd_annotate)

    sp = sub.add_parser("train", help="train one model from a run config")
    sp.add_argument("--config", required=True)
    overrides(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="train a hyperparameter grid and select on validation NDCG")
    sp.add_argument("--config", required=True)
    sp.add_argument("--grid", required=True, help="TOML with alpha = [...] or eta = [...]")
    sp.add_argument("--jobs", type=int, default=1)
    overrides(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("evaluate", help="full-catalogue NDCG@K of a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint path (without .bin/.json)")
    sp.add_argument("--split", choices=["val", "test"], default="test")
    sp.add_argument("--groups", help="group file from 'annotate'")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
    sp.add_argument("--method", help="method name recorded in the report")
    sp.add_argument("--exclude-seen", action="store_true", help="drop already-seen items from the ranking")
    sp.add_argument("--no-per-user", action="store_true", help="omit per-user values from the report")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="comparison table and percentage-increase figure")
    sp.add_argument("--runs", nargs="+", required=True, help="evaluate output directories")
    sp.add_argument("--baseline", default="ERM")
    sp.add_argument("--groups", help="group file, enables per-group significance tests")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="run pipeline stages from an experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--stages", default="all", help="comma list of prepare,annotate,train,evaluate,report")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="rerun stages even when up-to-date")
    sp.add_argument("--jobs", type=int, default=1, help="parallel sweep processes")
    overrides(sp)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("reproduce-table", help="train and report every method of one table")
    sp.add_argument("--config", required=True)
    sp.add_argument("--table", choices=["poponly", "seqonly", "popseq"], required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--jobs", type=int, default=1)
    overrides(sp)
    sp.set_defaults(func=cmd_reproduce_table)

    sp = sub.add_parser("synth", help="write a synthetic Retailrocket-style events.csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--users", type=int, default=600)
    sp.add_argument("--minority-fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    from .train import SweepError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SweepError as e:
        print(f"child stage failed: {e}", file=sys.stderr)
        return EXIT_CHILD


if __name__ == "__main__":
    sys.exit(main())
