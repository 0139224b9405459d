"""Experiment configuration files (TOML) with strict key checking.

Scalar fields can be overridden from the environment with
``SEQREC__<SECTION>__<KEY>=<toml value>`` or on the command line with
``--set section.key=value``.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError
from .model import ModelConfig
from .objectives import ObjectiveConfig
from .synthetic import SyntheticConfig

ENV_PREFIX = "SEQREC__"

DATASET_KEYS = {"kind", "input", "core_k", "dedup"}
GROUP_KEYS = {"scheme", "split_pop", "split_seq", "interpretation", "popular_fraction"}
TRAIN_KEYS = {"epochs", "batch_size", "batches_per_epoch", "lr", "seed"}
EVAL_KEYS = {"k", "split", "baseline", "exclude_seen"}
SWEEP_KEYS = {"alpha_grid", "eta_grid", "jobs"}
METHOD_KEYS = {"kind", "alpha", "eta", "beta", "group_axis", "streaming"}
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"catalogue_size", "seed"}
SYNTH_KEYS = {f.name for f in fields(SyntheticConfig)}
SECTIONS = {
    "dataset": DATASET_KEYS,
    "groups": GROUP_KEYS,
    "model": MODEL_KEYS,
    "train": TRAIN_KEYS,
    "eval": EVAL_KEYS,
    "sweep": SWEEP_KEYS,
    "synthetic": SYNTH_KEYS,
    "methods": None,
}


def _check_keys(section: str, got: dict, allowed: set) -> None:
    unknown = set(got) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def _parse_scalar(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str] | None = None, environ=None) -> dict:
    raw = copy.deepcopy(raw)
    pairs = []
    environ = os.environ if environ is None else environ
    for key, value in sorted(environ.items()):
        if key.startswith(ENV_PREFIX):
            pairs.append((key[len(ENV_PREFIX):].lower().split("__"), value))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs.append((key.strip().split("."), value.strip()))
    for path, value in pairs:
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {'.'.join(path)} does not name a table")
        node[path[-1]] = _parse_scalar(value)
    return raw


@dataclass
class MethodSpec:
    name: str
    kind: str
    alpha: float | list[float] | None = None
    eta: float | list[float] | None = None
    beta: float = 0.1
    group_axis: str | None = None
    streaming: str = "ema"

    @property
    def grid(self) -> tuple[str, list[float]] | None:
        for param in ("alpha", "eta"):
            v = getattr(self, param)
            if isinstance(v, list):
                return param, v
        return None

    def objective(self, **override) -> ObjectiveConfig:
        kw = dict(kind=self.kind, alpha=self.alpha, eta=self.eta, beta=self.beta,
                  group_axis=self.group_axis, streaming=self.streaming)
        if self.grid:
            kw[self.grid[0]] = self.grid[1][0]
        kw.update(override)
        return ObjectiveConfig(**kw)


@dataclass
class ExperimentConfig:
    dataset: dict
    groups: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    methods: dict[str, MethodSpec] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        for name, allowed in SECTIONS.items():
            if allowed is not None:
                _check_keys(name, raw.get(name, {}), allowed)
        if "dataset" not in raw or "kind" not in raw["dataset"]:
            raise ConfigError("[dataset] kind is required")
        kind = raw["dataset"]["kind"]
        if kind not in ("retailrocket", "ml1m", "synthetic"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind != "synthetic" and "input" not in raw["dataset"]:
            raise ConfigError("[dataset] input is required for real datasets")
        methods = {}
        for name, spec in raw.get("methods", {}).items():
            _check_keys(f"methods.{name}", spec, METHOD_KEYS)
            m = MethodSpec(name=name, **spec)
            m.objective()  # validate
            methods[name] = m
        cfg = cls(
            dataset=dict(raw["dataset"]),
            groups=dict(raw.get("groups", {})),
            model=dict(raw.get("model", {})),
            train=dict(raw.get("train", {})),
            eval=dict(raw.get("eval", {})),
            sweep=dict(raw.get("sweep", {})),
            synthetic=dict(raw.get("synthetic", {})),
            methods=methods,
            base_dir=Path(base_dir) if base_dir else Path.cwd(),
        )
        ModelConfig(catalogue_size=1, **cfg.model)  # validate
        SyntheticConfig(**cfg.synthetic)
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] | None = None, environ=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(apply_overrides(raw, overrides, environ), base_dir=path.parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def echo(self) -> dict:
        return {
            "dataset": self.dataset,
            "groups": self.groups,
            "model": self.model,
            "train": self.train,
            "eval": self.eval,
            "sweep": self.sweep,
            "synthetic": self.synthetic,
            "methods": {n: vars(m) for n, m in self.methods.items()},
        }


def load_run_config(path, overrides=None):
    """A single-run TOML: top-level RunConfig fields plus [model] and [objective]."""
    from .train import RunConfig

    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    raw = apply_overrides(raw, overrides)
    allowed = {f.name for f in fields(RunConfig)}
    _check_keys("run", raw, allowed)
    _check_keys("model", raw.get("model", {}), MODEL_KEYS)
    _check_keys("objective", raw.get("objective", {}), METHOD_KEYS)
    for key in ("dataset_dir", "groups_file", "out_dir"):
        if raw.get(key):
            p = Path(raw[key])
            raw[key] = str(p if p.is_absolute() else path.parent / p)
    try:
        return RunConfig(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_grid(path) -> tuple[str, tuple[float, ...]]:
    try:
        raw = tomli.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {path}") from None
    _check_keys("grid", raw, {"alpha", "eta"})
    if len(raw) != 1:
        raise ConfigError("grid file must define exactly one of 'alpha' or 'eta'")
    (param, values), = raw.items()
    return param, tuple(float(v) for v in values)
