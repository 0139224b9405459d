import csv

import pytest

from seqrec_dro.evaluation import MetricReport, aggregate
from seqrec_dro.groups import GroupAssignment, SPLITS
from seqrec_dro.report import PCT_COLUMNS, comparison_rows, percent_increase, percent_increase_report, results_table


def assignment():
    labels = {u: ("niche", "diverse", "popular")[u % 3] for u in range(9)}
    return GroupAssignment("popularity", labels_pop=labels, split_pop=SPLITS["33"])


def reports():
    a = assignment()
    base = aggregate({u: 0.2 for u in range(9)}, a, 20, "test")
    better = aggregate({u: 0.22 + 0.001 * u for u in range(9)}, a, 20, "test")
    zero = aggregate({u: 0.0 for u in range(9)}, a, 20, "test")
    return {"ERM": base, "CVaR": better, "Z": zero}


def test_percent_arithmetic():
    assert percent_increase(0.22, 0.20) == pytest.approx(10.0)
    assert percent_increase(0.3, 0.0) is None


def test_baseline_rows_are_zero():
    rows = comparison_rows(reports(), "ERM", assignment())
    assert all(r["pct_increase"] == 0.0 for r in rows if r["method"] == "ERM")
    assert {(r["axis"], r["group"]) for r in rows} == {
        ("pop", "niche"), ("pop", "diverse"), ("pop", "popular"), ("overall", "overall")}


def test_zero_baseline_marked_na():
    reps = reports()
    reps = {"ERM": reps["Z"], "CVaR": reps["CVaR"]}
    rows = comparison_rows(reps, "ERM", assignment())
    assert all(r["pct_increase"] == "NA" for r in rows)


def test_report_files(tmp_path):
    rows = percent_increase_report(reports(), "ERM", tmp_path, assignment())
    with open(tmp_path / "percent_increase.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == PCT_COLUMNS
        body = list(reader)
    assert len(body) == len(rows) == 12
    cvar = [r for r in body if r["method"] == "CVaR" and r["group"] == "overall"][0]
    assert float(cvar["pct_increase"]) > 0 and cvar["significant"] == "True"
    svg = (tmp_path / "percent_increase.svg").read_text()
    assert "<text" in svg and "CVaR" in svg


def test_report_is_byte_stable(tmp_path):
    percent_increase_report(reports(), "ERM", tmp_path / "a", assignment())
    percent_increase_report(reports(), "ERM", tmp_path / "b", assignment())
    for name in ("percent_increase.csv", "percent_increase.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_results_table_ranks_and_stars(tmp_path):
    results_table(reports(), "ERM", tmp_path, assignment(), order=["ERM", "CVaR", "Z"])
    with open(tmp_path / "table_wide.csv") as fh:
        wide = {r["method"]: r for r in csv.DictReader(fh)}
    assert wide["CVaR"]["overall"].endswith("* (1)")
    assert wide["ERM"]["overall"] == "0.2000 (2)"


def test_missing_baseline():
    with pytest.raises(KeyError):
        comparison_rows(reports(), "GDRO")


def test_report_json_roundtrip_keeps_groups(tmp_path):
    rep = reports()["CVaR"]
    rep.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.per_group == rep.per_group and back.group_sizes == rep.group_sizes
