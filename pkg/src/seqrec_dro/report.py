"""Comparison tables, significance stars and percentage-increase figures."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricReport, paired_t_test  # noqa: E402
from .groups import AXIS_LABELS, GroupAssignment  # noqa: E402

PCT_COLUMNS = ["method", "axis", "group", "baseline_value", "method_value", "pct_increase", "p_value", "significant"]


def _columns(report: MetricReport) -> list[tuple[str, str]]:
    cols = [(axis, g) for axis in report.per_group for g in AXIS_LABELS[axis]]
    return cols + [("overall", "overall")]


def _value(report: MetricReport, axis: str, group: str):
    return report.overall if axis == "overall" else report.per_group[axis].get(group)


def _members(assignment: GroupAssignment | None, axis: str, group: str, users: Sequence[int]):
    if axis == "overall":
        return list(users)
    if assignment is None or axis not in assignment.axes:
        return None
    labels = assignment.labels(axis)
    return [u for u in users if labels[u] == group]


def _significance(method: MetricReport, base: MetricReport, members, name: str, baseline: str):
    if members is None or len(members) < 2:
        return None
    return paired_t_test(method.values(members), base.values(members), name, baseline)


def percent_increase(method_value, baseline_value):
    if method_value is None or baseline_value is None or baseline_value == 0:
        return None
    return 100.0 * (method_value - baseline_value) / baseline_value


def comparison_rows(
    reports: Mapping[str, MetricReport],
    baseline: str,
    assignment: GroupAssignment | None = None,
) -> list[dict]:
    """One row per (method, group) with the change relative to ``baseline``."""
    if baseline not in reports:
        raise KeyError(f"baseline {baseline!r} not among reports {sorted(reports)}")
    base = reports[baseline]
    users = sorted(base.per_user)
    rows = []
    for name, rep in reports.items():
        if sorted(rep.per_user) != users:
            raise ValueError(f"{name} was evaluated on a different user set than {baseline}")
        for axis, group in _columns(base):
            bv, mv = _value(base, axis, group), _value(rep, axis, group)
            sig = None if name == baseline else _significance(
                rep, base, _members(assignment, axis, group, users), name, baseline)
            pct = percent_increase(mv, bv)
            rows.append({
                "method": name,
                "axis": axis,
                "group": group,
                "baseline_value": bv,
                "method_value": mv,
                "pct_increase": "NA" if pct is None else pct,
                "p_value": "" if sig is None else sig.p_value,
                "significant": False if sig is None else sig.significant,
            })
    return rows


def write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def plot_percent_increase(rows: list[dict], baseline: str, path) -> None:
    """Grouped bars of percentage change per group, one panel per axis."""
    axes = [a for a in dict.fromkeys(r["axis"] for r in rows) if a != "overall"] or ["overall"]
    methods = [m for m in dict.fromkeys(r["method"] for r in rows) if m != baseline]
    fig, panels = plt.subplots(1, len(axes), figsize=(5 * len(axes), 3.6), squeeze=False)
    width = 0.8 / max(len(methods), 1)
    for panel, axis in zip(panels[0], axes):
        groups = list(AXIS_LABELS.get(axis, ("overall",)))
        for i, m in enumerate(methods):
            vals = []
            for g in groups:
                r = next((r for r in rows if r["method"] == m and r["axis"] == axis and r["group"] == g), None)
                v = r["pct_increase"] if r else "NA"
                vals.append(0.0 if v == "NA" else float(v))
            xs = [j + (i - (len(methods) - 1) / 2) * width for j in range(len(groups))]
            bars = panel.bar(xs, vals, width, label=m)
            for bar, v in zip(bars, vals):
                panel.annotate(f"{v:+.1f}", (bar.get_x() + bar.get_width() / 2, v),
                               ha="center", va="bottom" if v >= 0 else "top", fontsize=6)
        panel.axhline(0, color="black", lw=0.6)
        panel.set_xticks(range(len(groups)), groups)
        panel.set_ylabel(f"% change in NDCG vs {baseline}")
        panel.set_title(axis)
    panels[0][-1].legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "seqrec-dro"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def percent_increase_report(
    reports: Mapping[str, MetricReport],
    baseline: str,
    out_dir,
    assignment: GroupAssignment | None = None,
) -> list[dict]:
    """Write ``percent_increase.csv`` and ``percent_increase.svg`` to ``out_dir``."""
    rows = comparison_rows(reports, baseline, assignment)
    out = Path(out_dir)
    write_csv(out / "percent_increase.csv", rows, PCT_COLUMNS)
    plot_percent_increase(rows, baseline, out / "percent_increase.svg")
    return rows


def results_table(
    reports: Mapping[str, MetricReport],
    baseline: str,
    out_dir,
    assignment: GroupAssignment | None = None,
    order: Sequence[str] | None = None,
) -> list[dict]:
    """Method-by-group NDCG table with best/second-best ranks and stars.

    Writes a long-form ``table.csv`` and a ``table_wide.csv`` whose cells
    read like ``0.2250*`` with ``(1)``/``(2)`` marking best and runner-up.
    """
    order = list(order or reports)
    rows = [r for r in comparison_rows(reports, baseline, assignment) if r["method"] in order]
    by_col: dict[tuple, list[dict]] = {}
    for r in rows:
        by_col.setdefault((r["axis"], r["group"]), []).append(r)
    for col_rows in by_col.values():
        ranked = sorted((r for r in col_rows if r["method_value"] is not None),
                        key=lambda r: (-r["method_value"], order.index(r["method"])))
        for r in col_rows:
            r["rank"] = ranked.index(r) + 1 if r in ranked else ""
    long_cols = ["method", "axis", "group", "method_value", "rank", "p_value", "significant"]
    out = Path(out_dir)
    write_csv(out / "table.csv", rows, long_cols)

    header = ["method"] + [g if a != "overall" else "overall" for a, g in by_col]
    wide = []
    for m in order:
        line = {"method": m}
        for (a, g), col_rows in by_col.items():
            r = next(r for r in col_rows if r["method"] == m)
            v = r["method_value"]
            cell = "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"
            if r["significant"]:
                cell += "*"
            if r["rank"] in (1, 2):
                cell += f" ({r['rank']})"
            line[g if a != "overall" else "overall"] = cell
        wide.append(line)
    write_csv(out / "table_wide.csv", wide, header)
    return rows
