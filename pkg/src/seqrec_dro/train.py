"""Seeded fixed-budget training runs and hyperparameter sweeps."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .data import Dataset, UserSequence, build_sequences, pad_batch
from .errors import ConfigError, NumericError
from .evaluation import evaluate
from .groups import AXIS_LABELS, GroupAssignment, file_hash, item_frequencies
from .model import ModelConfig, SASRec, batch_losses, params_finite, save_checkpoint
from .objectives import ItemWeightTable, Objective, ObjectiveConfig, erm_loss

log = logging.getLogger(__name__)

ETA_GRID = (1e-3, 5e-3, 1e-2, 5e-2, 0.1)
ALPHA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    dataset_dir: str | None = None
    groups_file: str | None = None
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 30
    batches_per_epoch: int = 128
    seed: int = 0
    k: int = 20
    exclude_seen: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        if self.epochs < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ConfigError("epochs, batch_size and batches_per_epoch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent child seeds for initialisation, dropout and batch sampling."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        name: int(child.generate_state(1, dtype=np.uint32)[0])
        for name, child in zip(("init", "dropout", "sampling"), children)
    }


class BatchSampler:
    """Cycle through freshly shuffled user orders, ``B`` users at a time."""

    def __init__(self, n_users: int, batch_size: int, rng: np.random.Generator):
        if n_users < 1:
            raise ValueError("no users to sample")
        self.n = n_users
        self.B = batch_size
        self.rng = rng
        self.perm = rng.permutation(n_users)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.B
        while need:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            take = min(need, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)


def sample_batch(n_users: int, B: int, rng: np.random.Generator, n_batches: int = 1) -> list[np.ndarray]:
    sampler = BatchSampler(n_users, B, rng)
    return [sampler.next() for _ in range(n_batches)]


def training_arrays(sequences: Sequence[UserSequence], L: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs/targets for next-item training within each training prefix."""
    prefixes = [s.train_prefix for s in sequences]
    return pad_batch([p[:-1] for p in prefixes], L), pad_batch([p[1:] for p in prefixes], L)


@dataclass
class TrainData:
    sequences: list[UserSequence]
    catalogue_size: int
    assignment: GroupAssignment | None = None
    dataset_hash: str | None = None
    groups_hash: str | None = None
    dataset_dir: str | None = None

    @classmethod
    def from_dataset(cls, dataset: Dataset, assignment=None, groups_hash=None, dataset_dir=None) -> "TrainData":
        return cls(build_sequences(dataset), dataset.n_items, assignment, dataset.content_hash(), groups_hash,
                   None if dataset_dir is None else str(dataset_dir))


def _group_labels(cfg: ObjectiveConfig, assignment: GroupAssignment | None):
    if not cfg.needs_groups:
        return None, None
    if assignment is None:
        raise ConfigError(f"objective {cfg.kind} needs a group assignment")
    axis = cfg.group_axis
    if axis is None:
        if len(assignment.axes) != 1:
            raise ConfigError(f"{cfg.kind} under intersecting groups needs objective.group_axis")
        axis = assignment.axes[0]
    labels = assignment.labels(axis)
    present = set(labels.values())
    # empty groups would only soak up simplex mass, so omega covers populated groups
    return labels, tuple(g for g in AXIS_LABELS[axis] if g in present)


@dataclass
class TrainResult:
    model: SASRec
    best_epoch: int
    best_score: float
    val_scores: list[float]
    trace: list[dict]
    steps: int


def train_model(run: RunConfig, data: TrainData, progress: bool = False,
                item_table: ItemWeightTable | None = None) -> TrainResult:
    """Train for exactly ``epochs * batches_per_epoch`` steps.

    Validation NDCG@k is measured after every epoch and the best epoch's
    parameters are returned (earliest epoch on ties). CB/CBlog weights come
    from training frequencies unless ``item_table`` is given.
    """
    streams = seed_streams(run.seed)
    mcfg = ModelConfig(catalogue_size=data.catalogue_size, **{**run.model, "seed": streams["init"]})
    model = SASRec(mcfg)
    if item_table is None and run.objective.kind in ("CB", "CBlog"):
        item_table = ItemWeightTable.from_frequencies(item_frequencies(data.sequences), data.catalogue_size)
    labels, groups = _group_labels(run.objective, data.assignment)
    objective = Objective(run.objective, item_table, labels, groups)

    inputs, targets = training_arrays(data.sequences, mcfg.max_len)
    user_index = np.array([s.user for s in data.sequences])
    inputs_t, targets_t = torch.from_numpy(inputs), torch.from_numpy(targets)
    sampler = BatchSampler(len(data.sequences), run.batch_size, np.random.default_rng(streams["sampling"]))
    optimizer = torch.optim.Adam(model.parameters(), lr=run.lr)
    torch.manual_seed(streams["dropout"])

    trace: list[dict] = []
    val_scores: list[float] = []
    best = (-1.0, 0, None)
    step = 0
    for epoch in range(1, run.epochs + 1):
        model.train()
        for _ in range(run.batches_per_epoch):
            rows = sampler.next()
            b = batch_losses(model, inputs_t[rows], targets_t[rows], user_ids=user_index[rows].tolist())
            loss = objective(b)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}); last trace: {trace[-3:]}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            row = {"step": step, "epoch": epoch, "loss": float(loss.detach()), "erm_loss": float(erm_loss(b).detach())}
            for g, v in objective.last_group_losses.items():
                row[f"L[{g}]"] = v
            if objective.state is not None:
                for g, w in objective.state.as_dict().items():
                    row[f"omega[{g}]"] = w
            trace.append(row)
        if not params_finite(model):
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        score = evaluate(model, data.sequences, None, "val", run.k, run.exclude_seen).overall
        val_scores.append(score)
        if score > best[0]:
            best = (score, epoch, copy.deepcopy(model.state_dict()))
        if progress:
            log.info("epoch %d loss %.4f val ndcg@%d %.4f", epoch, trace[-1]["loss"], run.k, score)
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, best[1], best[0], val_scores, trace, step)


def write_trace(path, trace: list[dict]) -> None:
    keys: list[str] = []
    for row in trace:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(trace)


def load_train_data(run: RunConfig) -> TrainData:
    if run.dataset_dir is None:
        raise ConfigError("run config has no dataset_dir")
    dataset = Dataset.load(run.dataset_dir)
    assignment = groups_hash = None
    if run.groups_file:
        assignment = GroupAssignment.load(run.groups_file)
        groups_hash = file_hash(run.groups_file)
    elif run.objective.needs_groups:
        raise ConfigError(f"objective {run.objective.kind} needs groups_file")
    return TrainData.from_dataset(dataset, assignment, groups_hash, run.dataset_dir)


def train_run(run: RunConfig, data: TrainData | None = None) -> dict:
    """Train, then write checkpoint, trace CSV and run manifest to ``out_dir``."""
    if run.out_dir is None:
        raise ConfigError("run config has no out_dir")
    started = time.time()
    data = data or load_train_data(run)
    result = train_model(run, data)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    digest = save_checkpoint(
        ckpt, result.model, result.best_epoch,
        extra={"dataset_hash": data.dataset_hash, "groups_hash": data.groups_hash,
               "dataset_dir": data.dataset_dir, "groups_file": run.groups_file},
    )
    write_trace(out / "trace.csv", result.trace)
    manifest = {
        "config": run.to_json(),
        "seed": run.seed,
        "seed_streams": seed_streams(run.seed),
        "dataset_hash": data.dataset_hash,
        "groups_hash": data.groups_hash,
        "val_scores": result.val_scores,
        "best_epoch": result.best_epoch,
        "best_val_ndcg": result.best_score,
        "steps": result.steps,
        "checkpoint": str(ckpt),
        "checkpoint_sha256": digest,
        "tool_version": __version__,
        "wall_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class SweepSpec:
    base: RunConfig
    param: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.param not in ("alpha", "eta"):
            raise ConfigError("sweep parameter must be 'alpha' or 'eta'")
        if not self.values:
            raise ConfigError("sweep grid is empty")
        kind = self.base.objective.kind
        if self.param == "alpha" and kind != "CVaR":
            raise ConfigError(f"alpha grid does not apply to {kind}")
        if self.param == "eta" and kind not in ("GDRO", "SDRO"):
            raise ConfigError(f"eta grid does not apply to {kind}")

    @classmethod
    def default(cls, base: RunConfig) -> "SweepSpec":
        if base.objective.kind == "CVaR":
            return cls(base, "alpha", ALPHA_GRID)
        if base.objective.kind in ("GDRO", "SDRO"):
            return cls(base, "eta", ETA_GRID)
        raise ConfigError(f"{base.objective.kind} has no tuned hyperparameter")

    def points(self) -> list[RunConfig]:
        out_root = Path(self.base.out_dir) if self.base.out_dir else None
        runs = []
        for v in self.values:
            obj = replace(self.base.objective, **{self.param: v})
            out = str(out_root / f"{self.param}={v:g}") if out_root else None
            runs.append(replace(self.base, objective=obj, out_dir=out))
        return runs


class SweepError(RuntimeError):
    pass


def _run_point(args):
    run, data = args
    return train_run(run, data)


def sweep(spec: SweepSpec, data: TrainData | None = None, jobs: int = 1) -> dict:
    """Train every grid point and select the best overall validation NDCG.

    Ties go to the smaller hyperparameter value. Scores of finished points
    are written to ``sweep.json`` even when a point fails.
    """
    data = data or load_train_data(spec.base)
    runs = spec.points()
    results: dict[float, dict] = {}
    errors: dict[float, str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {v: pool.submit(_run_point, (r, data)) for v, r in zip(spec.values, runs)}
            for v, fut in futures.items():
                try:
                    results[v] = fut.result()
                except Exception as e:  # noqa: BLE001 - recorded and re-raised below
                    errors[v] = repr(e)
    else:
        for v, r in zip(spec.values, runs):
            try:
                results[v] = train_run(r, data)
            except Exception as e:  # noqa: BLE001
                errors[v] = repr(e)
                break
    scores = {v: m["best_val_ndcg"] for v, m in results.items()}
    best_value = None
    for v in sorted(scores):
        if best_value is None or scores[v] > scores[best_value]:
            best_value = v
    summary = {
        "param": spec.param,
        "grid": list(spec.values),
        "scores": [{"value": v, "val_ndcg": scores[v], "out_dir": results[v]["checkpoint"].rsplit("/", 1)[0]}
                   for v in sorted(scores)],
        "errors": {str(k): e for k, e in errors.items()},
        "selected": best_value,
        "selected_checkpoint": results[best_value]["checkpoint"] if best_value is not None else None,
    }
    if spec.base.out_dir:
        Path(spec.base.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(spec.base.out_dir) / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if errors:
        raise SweepError(f"sweep point(s) failed: {errors}")
    return summary
