"""Desk-scale comparison of CVaR against ERM on the synthetic minority dataset.

Each seed runs the full command-line pipeline with the synthetic generator
and the training sampler both seeded by that seed.
"""
from __future__ import annotations

import csv
import json
import time
from pathlib import Path

from .cli import main as cli_main
from .evaluation import MetricReport


def run_seed(config, seed: int, out_root, axis: str = "pop", jobs: int = 1, baseline: str = "ERM",
             method: str = "CVaR") -> dict:
    out = Path(out_root) / f"seed={seed}"
    started = time.time()
    code = cli_main(["pipeline", "--config", str(config), "--out", str(out), "--jobs", str(jobs),
                     "--set", f"synthetic.seed={seed}", "--set", f"train.seed={seed}"])
    if code != 0:
        return {"seed": seed, "exit_code": code, "ok": False}
    base = MetricReport.load(out / "evaluate" / baseline / "report.json")
    other = MetricReport.load(out / "evaluate" / method / "report.json")
    base_group, base_worst = base.worst_group(axis)
    other_group, other_worst = other.worst_group(axis)
    with open(out / "report" / "percent_increase.csv") as fh:
        bar = next(r for r in csv.DictReader(fh)
                   if r["method"] == method and r["axis"] == axis and r["group"] == base_group)
    sweep = json.loads((out / "train" / method / "sweep.json").read_text())
    return {
        "seed": seed,
        "exit_code": code,
        "worst_group": base_group,
        f"{baseline}_worst": base_worst,
        f"{method}_worst": other_worst,
        f"{method}_worst_group": other_group,
        "worst_group_pct_increase": None if bar["pct_increase"] == "NA" else float(bar["pct_increase"]),
        "selected_alpha": sweep["selected"],
        f"{baseline}_overall": base.overall,
        f"{method}_overall": other.overall,
        "figure": str(out / "report" / "percent_increase.svg"),
        "ok": other_worst > base_worst,
        "seconds": round(time.time() - started, 1),
    }


def desk_experiment(config, seeds=(0, 1, 2, 3, 4), out_root="desk_runs", jobs: int = 1, need: int = 4) -> dict:
    started = time.time()
    rows = [run_seed(config, s, out_root, jobs=jobs) for s in seeds]
    wins = sum(r["ok"] for r in rows)
    positive_bar = sum(bool(r.get("worst_group_pct_increase") and r["worst_group_pct_increase"] > 0) for r in rows)
    summary = {
        "seeds": rows,
        "wins": wins,
        "positive_worst_group_bars": positive_bar,
        "needed": need,
        "passed": wins >= need and positive_bar >= need,
        "seconds": round(time.time() - started, 1),
    }
    Path(out_root).mkdir(parents=True, exist_ok=True)
    (Path(out_root) / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
