"""Stage orchestration: prepare -> annotate -> train -> evaluate -> report.

Each stage writes ``stage.json`` recording a key built from its config
section and input hashes. A rerun with the same key and existing outputs is
skipped.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, MethodSpec
from .data import Dataset, build_sequences, prepare as prepare_dataset
from .errors import ConfigError, DataError
from .evaluation import MetricReport, evaluate
from .groups import GroupAssignment, annotate, file_hash
from .model import load_checkpoint
from .report import percent_increase_report, results_table
from .synthetic import SyntheticConfig, write_events
from .train import ALPHA_GRID, ETA_GRID, RunConfig, SweepSpec, TrainData, sweep, train_run

log = logging.getLogger(__name__)

STAGES = ("prepare", "annotate", "train", "evaluate", "report")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _up_to_date(stage_dir: Path, key: str, outputs: list[Path]) -> bool:
    manifest = stage_dir / "stage.json"
    if not manifest.exists():
        return False
    try:
        recorded = json.loads(manifest.read_text()).get("key")
    except json.JSONDecodeError:
        return False
    return recorded == key and all(p.exists() for p in outputs)


def _write_stage(stage_dir: Path, stage: str, key: str, config_echo, inputs: dict, outputs: dict, started: float):
    stage_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "stage": stage,
        "key": key,
        "config": config_echo,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_seconds": round(time.time() - started, 3),
    }
    (stage_dir / "stage.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_root, force: bool = False, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out_root)
        self.force = force
        self.jobs = jobs
        self.status: dict[str, str] = {}

    # -- paths ------------------------------------------------------------
    @property
    def dataset_dir(self) -> Path:
        return self.out / "prepare" / "dataset"

    @property
    def groups_file(self) -> Path:
        return self.out / "annotate" / "groups.json"

    def method_dir(self, name: str) -> Path:
        return self.out / "train" / name

    def report_file(self, name: str) -> Path:
        return self.out / "evaluate" / name / "report.json"

    def _require(self, path: Path, producer: str) -> None:
        if not path.exists():
            raise DataError(f"missing input {path} (run the '{producer}' stage first)")

    def _skip(self, label: str, stage_dir: Path, key: str, outputs: list[Path]) -> bool:
        if not self.force and _up_to_date(stage_dir, key, outputs):
            self.status[label] = "up-to-date"
            log.info("%s: up-to-date", label)
            return True
        self.status[label] = "ran"
        return False

    # -- stages -----------------------------------------------------------
    def prepare(self) -> None:
        started = time.time()
        d = self.cfg.dataset
        stage_dir = self.out / "prepare"
        core_k = int(d.get("core_k", 5))
        if d["kind"] == "synthetic":
            source = {"synthetic": self.cfg.synthetic}
        else:
            path = self.cfg.resolve(d["input"])
            if not path.exists():
                raise DataError(f"input file not found: {path}")
            source = {"input": str(path), "sha256": file_hash(path)}
        key = _digest({"dataset": d, "source": source})
        outputs = [self.dataset_dir / "interactions.npy", self.dataset_dir / "index.json"]
        if self._skip("prepare", stage_dir, key, outputs):
            return
        if d["kind"] == "synthetic":
            events = stage_dir / "events.csv"
            write_events(SyntheticConfig(**self.cfg.synthetic), events)
            dataset = prepare_dataset("retailrocket", events, core_k)
        else:
            dataset = prepare_dataset(d["kind"], self.cfg.resolve(d["input"]), core_k, bool(d.get("dedup", False)))
        digest = dataset.save(self.dataset_dir)
        _write_stage(stage_dir, "prepare", key, d, source,
                     {"dataset_hash": digest, "stats": dataset.stats(), "dir": str(self.dataset_dir)}, started)

    def _dataset_hash(self) -> str:
        self._require(self.out / "prepare" / "stage.json", "prepare")
        return json.loads((self.out / "prepare" / "stage.json").read_text())["outputs"]["dataset_hash"]

    def annotate(self) -> None:
        started = time.time()
        g = self.cfg.groups
        stage_dir = self.out / "annotate"
        data_hash = self._dataset_hash()
        key = _digest({"groups": g, "dataset_hash": data_hash})
        if self._skip("annotate", stage_dir, key, [self.groups_file]):
            return
        dataset = Dataset.load(self.dataset_dir)
        seqs = build_sequences(dataset)
        scheme = g.get("scheme", "popularity")
        assignment = annotate(
            seqs, scheme,
            split_pop=g.get("split_pop", "33"),
            split_seq=g.get("split_seq", "33"),
            interpretation=g.get("interpretation", "dsplit"),
            popular_fraction=float(g.get("popular_fraction", 0.2)),
        )
        digest = assignment.save(self.groups_file, seqs)
        outputs = {"groups_hash": digest, "usplit": {a: assignment.usplit(a) for a in assignment.axes},
                   "dsplit": {a: assignment.dsplit(a, seqs) for a in assignment.axes}}
        _write_stage(stage_dir, "annotate", key, g, {"dataset_hash": data_hash}, outputs, started)

    def _run_config(self, method: MethodSpec, out_dir: Path) -> RunConfig:
        t = self.cfg.train
        return RunConfig(
            model=dict(self.cfg.model),
            objective=method.objective(),
            dataset_dir=str(self.dataset_dir),
            groups_file=str(self.groups_file) if self.groups_file.exists() else None,
            lr=float(t.get("lr", 0.001)),
            batch_size=int(t.get("batch_size", 128)),
            epochs=int(t.get("epochs", 30)),
            batches_per_epoch=int(t.get("batches_per_epoch", 128)),
            seed=int(t.get("seed", 0)),
            k=int(self.cfg.eval.get("k", 20)),
            exclude_seen=bool(self.cfg.eval.get("exclude_seen", False)),
            out_dir=str(out_dir),
        )

    def train(self) -> None:
        if not self.cfg.methods:
            raise ConfigError("no [methods] configured")
        data_hash = self._dataset_hash()
        groups_hash = file_hash(self.groups_file) if self.groups_file.exists() else None
        data = None
        for name, method in self.cfg.methods.items():
            started = time.time()
            out_dir = self.method_dir(name)
            run = self._run_config(method, out_dir)
            echo = {"run": run.to_json(), "grid": method.grid}
            key = _digest({"train": echo, "dataset_hash": data_hash, "groups_hash": groups_hash})
            marker = out_dir / ("sweep.json" if method.grid else "manifest.json")
            if self._skip(f"train:{name}", out_dir, key, [marker]):
                continue
            if data is None:
                data = TrainData.from_dataset(
                    Dataset.load(self.dataset_dir),
                    GroupAssignment.load(self.groups_file) if groups_hash else None,
                    groups_hash,
                    self.dataset_dir,
                )
            if method.grid:
                param, values = method.grid
                summary = sweep(SweepSpec(run, param, tuple(values)), data, jobs=self.jobs)
                outputs = {"selected": summary["selected"], "checkpoint": summary["selected_checkpoint"]}
            else:
                manifest = train_run(run, data)
                outputs = {"checkpoint": manifest["checkpoint"], "best_val_ndcg": manifest["best_val_ndcg"]}
            _write_stage(out_dir, "train", key, echo,
                         {"dataset_hash": data_hash, "groups_hash": groups_hash}, outputs, started)

    def checkpoint_for(self, name: str) -> Path:
        d = self.method_dir(name)
        if (d / "sweep.json").exists() and self.cfg.methods[name].grid:
            return Path(json.loads((d / "sweep.json").read_text())["selected_checkpoint"])
        self._require(d / "manifest.json", "train")
        return d / "checkpoint"

    def evaluate(self) -> None:
        data_hash = self._dataset_hash()
        groups_hash = file_hash(self.groups_file) if self.groups_file.exists() else None
        split = self.cfg.eval.get("split", "test")
        k = int(self.cfg.eval.get("k", 20))
        exclude_seen = bool(self.cfg.eval.get("exclude_seen", False))
        seqs = assignment = None
        for name in self.cfg.methods:
            started = time.time()
            ckpt = self.checkpoint_for(name)
            ckpt_hash = json.loads(ckpt.with_suffix(".json").read_text())["sha256"]
            key = _digest({"eval": self.cfg.eval, "checkpoint": ckpt_hash, "groups_hash": groups_hash})
            out = self.report_file(name)
            if self._skip(f"evaluate:{name}", out.parent, key, [out]):
                continue
            if seqs is None:
                seqs = build_sequences(Dataset.load(self.dataset_dir))
                assignment = GroupAssignment.load(self.groups_file) if groups_hash else None
            report = evaluate_checkpoint(ckpt, seqs, assignment, split, k, exclude_seen,
                                         expected_dataset_hash=data_hash, expected_groups_hash=groups_hash)
            report.meta["method"] = name
            report.save(out)
            _write_stage(out.parent, "evaluate", key, self.cfg.eval, {"checkpoint": str(ckpt)},
                         {"overall": report.overall, "per_group": report.per_group}, started)

    def report(self, order=None) -> None:
        started = time.time()
        baseline = self.cfg.eval.get("baseline", "ERM")
        names = list(order or self.cfg.methods)
        if baseline not in names:
            raise ConfigError(f"baseline {baseline!r} is not a configured method")
        for n in names:
            self._require(self.report_file(n), "evaluate")
        stage_dir = self.out / "report"
        key = _digest({"reports": {n: file_hash(self.report_file(n)) for n in names}, "baseline": baseline})
        if self._skip("report", stage_dir, key, [stage_dir / "percent_increase.csv", stage_dir / "table.csv"]):
            return
        reports = {n: MetricReport.load(self.report_file(n)) for n in names}
        assignment = GroupAssignment.load(self.groups_file) if self.groups_file.exists() else None
        results_table(reports, baseline, stage_dir, assignment, order=names)
        percent_increase_report(reports, baseline, stage_dir, assignment)
        _write_stage(stage_dir, "report", key, {"baseline": baseline, "methods": names}, {}, {
            "table": str(stage_dir / "table.csv"),
            "percent_increase": str(stage_dir / "percent_increase.csv"),
            "figure": str(stage_dir / "percent_increase.svg"),
        }, started)

    def run(self, stages) -> dict[str, str]:
        stages = list(stages)
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stage(s): {sorted(unknown)}")
        for stage in STAGES:
            if stage in stages:
                getattr(self, stage)()
        return self.status


def evaluate_checkpoint(ckpt, sequences, assignment, split="test", k=20, exclude_seen=False,
                        expected_dataset_hash=None, expected_groups_hash=None) -> MetricReport:
    model, manifest = load_checkpoint(ckpt)
    extra = manifest.get("extra", {})
    for what, expected in (("dataset_hash", expected_dataset_hash), ("groups_hash", expected_groups_hash)):
        recorded = extra.get(what)
        if expected is not None and recorded is not None and recorded != expected:
            raise DataError(f"{what} mismatch for checkpoint {ckpt}: trained on {recorded[:12]}, "
                            f"evaluating against {expected[:12]}")
    report = evaluate(model, sequences, assignment, split, k, exclude_seen)
    report.meta["checkpoint_sha256"] = manifest["sha256"]
    return report


def run_pipeline(cfg: ExperimentConfig, stages, out_root, force=False, jobs=1) -> dict[str, str]:
    return Pipeline(cfg, out_root, force, jobs).run(stages)


TABLE_IDS = ("poponly", "seqonly", "popseq")


def table_methods(table_id: str, alpha_grid=ALPHA_GRID, eta_grid=ETA_GRID) -> dict[str, MethodSpec]:
    """The method rows of each comparison table, with their tuning grids."""
    if table_id not in TABLE_IDS:
        raise ConfigError(f"unknown table {table_id!r}; expected one of {TABLE_IDS}")
    alpha, eta = list(alpha_grid), list(eta_grid)
    common = {
        "ERM": MethodSpec("ERM", "ERM"),
        "CB": MethodSpec("CB", "CB"),
        "CBlog": MethodSpec("CBlog", "CBlog"),
    }
    if table_id != "popseq":
        return {
            **common,
            "IPW": MethodSpec("IPW", "IPW"),
            "IPWlog": MethodSpec("IPWlog", "IPWlog"),
            "GDRO": MethodSpec("GDRO", "GDRO", eta=eta),
            "SDRO": MethodSpec("SDRO", "SDRO", eta=eta),
            "CVaR": MethodSpec("CVaR", "CVaR", alpha=alpha),
        }
    out = {**common, "CVaR": MethodSpec("CVaR", "CVaR", alpha=alpha)}
    for axis in ("pop", "seq"):
        out[f"IPW_{axis}"] = MethodSpec(f"IPW_{axis}", "IPW", group_axis=axis)
        out[f"IPWlog_{axis}"] = MethodSpec(f"IPWlog_{axis}", "IPWlog", group_axis=axis)
        out[f"GDRO_{axis}"] = MethodSpec(f"GDRO_{axis}", "GDRO", eta=eta, group_axis=axis)
        out[f"SDRO_{axis}"] = MethodSpec(f"SDRO_{axis}", "SDRO", eta=eta, group_axis=axis)
    return out


def reproduce_table(cfg: ExperimentConfig, table_id: str, out_root, force=False, jobs=1) -> Path:
    """Train and evaluate every method of one comparison table; returns the report dir."""
    cfg = copy.deepcopy(cfg)
    scheme = {"poponly": "popularity", "seqonly": "sequence_length", "popseq": "intersecting"}[table_id]
    cfg.groups = {**cfg.groups, "scheme": scheme}
    if table_id == "popseq":
        cfg.groups.setdefault("split_pop", "33")
        cfg.groups.setdefault("split_seq", "33")
    cfg.methods = table_methods(
        table_id,
        cfg.sweep.get("alpha_grid", ALPHA_GRID),
        cfg.sweep.get("eta_grid", ETA_GRID),
    )
    cfg.eval = {**cfg.eval, "baseline": "ERM"}
    pipe = Pipeline(cfg, out_root, force, jobs)
    pipe.prepare()
    n_users = Dataset.load(pipe.dataset_dir).n_users
    if n_users < 3:
        raise ConfigError(f"table {table_id} needs at least 3 users for group annotation, dataset has {n_users}")
    for stage in ("annotate", "train", "evaluate", "report"):
        getattr(pipe, stage)()
    return pipe.out / "report"
