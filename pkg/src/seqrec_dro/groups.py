"""User group annotation by popularity ratio and sequence length."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import UserSequence
from .errors import ConfigError, DataError

POP_LABELS = ("niche", "diverse", "popular")
SEQ_LABELS = ("short", "medium", "long")
AXIS_LABELS = {"pop": POP_LABELS, "seq": SEQ_LABELS}

SCHEMES = {
    "popularity": ("pop",),
    "sequence_length": ("seq",),
    "intersecting": ("pop", "seq"),
}
SCHEME_ALIASES = {"pop": "popularity", "seq": "sequence_length", "intersect": "intersecting"}


@dataclass(frozen=True)
class QuantileSplit:
    name: str
    fractions: tuple[float, float, float]

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"split {self.name}: fractions must be three positive values")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split {self.name}: fractions sum to {sum(self.fractions)}, not 1")


SPLITS = {
    "33": QuantileSplit("33", (1 / 3, 1 / 3, 1 / 3)),
    "2060": QuantileSplit("2060", (0.2, 0.6, 0.2)),
    "1080": QuantileSplit("1080", (0.1, 0.8, 0.1)),
}


def get_split(name) -> QuantileSplit:
    if isinstance(name, QuantileSplit):
        return name
    try:
        return SPLITS[str(name)]
    except KeyError:
        raise ConfigError(f"unknown split {name!r}; expected one of {sorted(SPLITS)}") from None


@dataclass
class ItemFrequencyTable:
    freq: dict[int, int]
    total: int

    def __len__(self) -> int:
        return len(self.freq)


def item_frequencies(sequences: Iterable[UserSequence]) -> ItemFrequencyTable:
    """Count item occurrences over training prefixes only."""
    counts: Counter = Counter()
    for s in sequences:
        counts.update(int(x) for x in s.train_prefix)
    freq = dict(sorted(counts.items()))
    return ItemFrequencyTable(freq, sum(freq.values()))


def popular_item_set(freqs: ItemFrequencyTable, top_fraction: float = 0.2) -> set[int]:
    """The ceil(top_fraction * |items|) most frequent items; ties go to the lower index."""
    if not 0 < top_fraction < 1:
        raise ValueError("top_fraction must be in (0, 1)")
    if not freqs.freq:
        raise DataError("empty item frequency table")
    ranked = sorted(freqs.freq.items(), key=lambda kv: (-kv[1], kv[0]))
    n = math.ceil(top_fraction * len(ranked))
    return {item for item, _ in ranked[:n]}


def popularity_ratio(seq: UserSequence, popular: set[int]) -> float:
    prefix = seq.train_prefix
    if len(prefix) == 0:
        raise DataError(f"user {seq.user_id} has an empty training prefix")
    return sum(int(x) in popular for x in prefix) / len(prefix)


def assign_by_quantile(
    scores: Mapping[int, float],
    split: QuantileSplit,
    label_names: Sequence[str],
    mass: Mapping[int, float] | None = None,
) -> dict[int, str]:
    """Label users bottom/middle/top by ascending score.

    Without ``mass`` the split fractions are shares of users (usplit). With
    ``mass`` (training interactions per user) the fractions are shares of
    total mass (dsplit): each user goes to the band containing the midpoint
    of its slice of the cumulative mass curve. Ties rank by user index.
    """
    if len(scores) < 3:
        raise ConfigError(f"need at least 3 users to form groups, got {len(scores)}")
    users = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
    vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    order = users[np.lexsort((users, vals))]
    bottom, middle, _ = split.fractions
    n = len(order)
    if mass is None:
        n_bottom = math.floor(bottom * n)
        n_top = math.floor(split.fractions[2] * n)
        band = np.full(n, 1)
        band[:n_bottom] = 0
        band[n - n_top:] = 2
    else:
        w = np.array([float(mass[u]) for u in order])
        if np.any(w < 0) or w.sum() <= 0:
            raise DataError("group mass must be non-negative with a positive total")
        cum = np.cumsum(w)
        mid = (cum - w / 2) / cum[-1]
        band = np.where(mid < bottom, 0, np.where(mid < bottom + middle, 1, 2))
    return {int(u): label_names[b] for u, b in zip(order, band)}


@dataclass
class GroupAssignment:
    scheme: str
    labels_pop: dict[int, str] | None = None
    labels_seq: dict[int, str] | None = None
    split_pop: QuantileSplit | None = None
    split_seq: QuantileSplit | None = None
    interpretation: str = "dsplit"
    popular_fraction: float = 0.2
    user_ids: dict[int, str] = field(default_factory=dict)

    @property
    def axes(self) -> tuple[str, ...]:
        return SCHEMES[self.scheme]

    def labels(self, axis: str) -> dict[int, str]:
        got = self.labels_pop if axis == "pop" else self.labels_seq if axis == "seq" else None
        if got is None:
            raise ConfigError(f"group assignment ({self.scheme}) has no {axis!r} labels")
        return got

    def usplit(self, axis: str) -> dict[str, float]:
        """Percentage of users in each group."""
        labels = self.labels(axis)
        counts = Counter(labels.values())
        return {g: 100.0 * counts.get(g, 0) / len(labels) for g in AXIS_LABELS[axis]}

    def dsplit(self, axis: str, sequences: Sequence[UserSequence]) -> dict[str, float]:
        """Percentage of training interactions held by each group."""
        labels = self.labels(axis)
        mass: Counter = Counter()
        for s in sequences:
            mass[labels[s.user]] += len(s.train_prefix)
        total = sum(mass.values())
        return {g: 100.0 * mass.get(g, 0) / total for g in AXIS_LABELS[axis]}

    def to_json(self, sequences: Sequence[UserSequence] | None = None) -> dict:
        users = sorted(set(self.labels_pop or {}) | set(self.labels_seq or {}))
        labels = {}
        for u in users:
            entry = {"index": u}
            if self.labels_pop is not None:
                entry["pop"] = self.labels_pop[u]
            if self.labels_seq is not None:
                entry["seq"] = self.labels_seq[u]
            labels[self.user_ids.get(u, str(u))] = entry
        doc = {
            "scheme": self.scheme,
            "interpretation": self.interpretation,
            "popular_fraction": self.popular_fraction,
            "split_pop": self.split_pop.name if self.split_pop else None,
            "split_seq": self.split_seq.name if self.split_seq else None,
            "usplit": {a: self.usplit(a) for a in self.axes},
            "labels": labels,
        }
        if sequences is not None:
            doc["dsplit"] = {a: self.dsplit(a, sequences) for a in self.axes}
        return doc

    def save(self, path, sequences=None) -> str:
        text = json.dumps(self.to_json(sequences), indent=1, sort_keys=True)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "GroupAssignment":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"group assignment file not found: {path}") from None
        pop, seq, ids = {}, {}, {}
        for user_id, entry in doc["labels"].items():
            u = int(entry["index"])
            ids[u] = user_id
            if "pop" in entry:
                pop[u] = entry["pop"]
            if "seq" in entry:
                seq[u] = entry["seq"]
        return cls(
            scheme=doc["scheme"],
            labels_pop=pop or None,
            labels_seq=seq or None,
            split_pop=get_split(doc["split_pop"]) if doc["split_pop"] else None,
            split_seq=get_split(doc["split_seq"]) if doc["split_seq"] else None,
            interpretation=doc["interpretation"],
            popular_fraction=doc["popular_fraction"],
            user_ids=ids,
        )


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def annotate(
    sequences: Sequence[UserSequence],
    scheme: str,
    split_pop=None,
    split_seq=None,
    interpretation: str = "dsplit",
    popular_fraction: float = 0.2,
) -> GroupAssignment:
    """Build popularity and/or sequence-length labels for every user."""
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}")
    if interpretation not in ("dsplit", "usplit"):
        raise ConfigError(f"unknown split interpretation {interpretation!r}")
    axes = SCHEMES[scheme]
    if "pop" in axes and split_pop is None:
        raise ConfigError(f"scheme {scheme} needs a popularity split")
    if "seq" in axes and split_seq is None:
        raise ConfigError(f"scheme {scheme} needs a sequence-length split")
    if len(sequences) < 3:
        raise ConfigError(f"need at least 3 users to form groups, got {len(sequences)}")

    mass = {s.user: len(s.train_prefix) for s in sequences} if interpretation == "dsplit" else None
    out = GroupAssignment(
        scheme=scheme,
        interpretation=interpretation,
        popular_fraction=popular_fraction,
        user_ids={s.user: s.user_id for s in sequences},
    )
    if "pop" in axes:
        popular = popular_item_set(item_frequencies(sequences), popular_fraction)
        scores = {s.user: popularity_ratio(s, popular) for s in sequences}
        out.split_pop = get_split(split_pop)
        out.labels_pop = assign_by_quantile(scores, out.split_pop, POP_LABELS, mass)
    if "seq" in axes:
        scores = {s.user: float(len(s.train_prefix)) for s in sequences}
        out.split_seq = get_split(split_seq)
        out.labels_seq = assign_by_quantile(scores, out.split_seq, SEQ_LABELS, mass)
    return out
