"""Run the five-seed desk-scale CVaR vs ERM experiment through the CLI pipeline.

    python scripts/desk_experiment.py --out desk_runs
"""
import argparse
import json
from pathlib import Path

from seqrec_dro.desk import desk_experiment

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_synthetic.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="desk_runs")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    summary = desk_experiment(args.config, args.seeds, args.out, args.jobs)
    for r in summary["seeds"]:
        print(f"seed {r['seed']}: worst group {r.get('worst_group')} "
              f"ERM {r.get('ERM_worst', float('nan')):.4f} -> CVaR {r.get('CVaR_worst', float('nan')):.4f} "
              f"(alpha={r.get('selected_alpha')}, {r.get('worst_group_pct_increase', 0):+.1f}%)")
    print(json.dumps({k: v for k, v in summary.items() if k != "seeds"}))
