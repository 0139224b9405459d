"""Full-catalogue leave-one-out ranking evaluation and significance tests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import special

from .data import UserSequence, pad_batch
from .groups import AXIS_LABELS, GroupAssignment
from .model import SASRec


def rank_target(scores, target: int) -> int:
    """1-based rank of item ``target`` among all items.

    ``scores[j]`` scores item ``j + 1``. Items tied with the target count as
    ranked above it.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not 1 <= target <= len(s):
        raise IndexError(f"target {target} outside 1..{len(s)}")
    t = s[target - 1]
    return int(np.count_nonzero(s >= t))


def ndcg_at_k(rank: int, k: int = 20) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def _ranks(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    t = scores.gather(1, (targets - 1)[:, None])
    return (scores >= t).sum(dim=1)


def eval_inputs(seq: UserSequence, split: str) -> tuple[np.ndarray, int]:
    if split == "val":
        return seq.history[:-2], seq.val_target
    if split == "test":
        return seq.history[:-1], seq.test_target
    raise ValueError(f"split must be 'val' or 'test', got {split!r}")


@dataclass
class MetricReport:
    k: int
    split: str
    per_user: dict[int, float]
    overall: float
    per_group: dict[str, dict[str, float | None]] = field(default_factory=dict)
    group_sizes: dict[str, dict[str, int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def values(self, users: Sequence[int] | None = None) -> np.ndarray:
        users = sorted(self.per_user) if users is None else users
        return np.array([self.per_user[u] for u in users])

    def worst_group(self, axis: str) -> tuple[str, float]:
        means = {g: v for g, v in self.per_group[axis].items() if v is not None}
        g = min(means, key=means.get)
        return g, means[g]

    def to_json(self, include_users: bool = True) -> dict:
        doc = {
            "k": self.k,
            "split": self.split,
            "overall": self.overall,
            "per_group": self.per_group,
            "group_sizes": self.group_sizes,
            "meta": self.meta,
        }
        if include_users:
            doc["per_user"] = {str(u): v for u, v in sorted(self.per_user.items())}
        return doc

    def save(self, path, include_users: bool = True) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(include_users), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MetricReport":
        doc = json.loads(Path(path).read_text())
        return cls(
            k=doc["k"],
            split=doc["split"],
            per_user={int(u): v for u, v in doc.get("per_user", {}).items()},
            overall=doc["overall"],
            per_group=doc["per_group"],
            group_sizes=doc.get("group_sizes", {}),
            meta=doc.get("meta", {}),
        )


def aggregate(
    per_user: Mapping[int, float], assignment: GroupAssignment | None, k: int, split: str
) -> MetricReport:
    users = sorted(per_user)
    vals = np.array([per_user[u] for u in users])
    report = MetricReport(k=k, split=split, per_user=dict(zip(users, vals.tolist())), overall=float(vals.mean()))
    if assignment is not None:
        for axis in assignment.axes:
            labels = assignment.labels(axis)
            missing = [u for u in users if u not in labels]
            if missing:
                raise KeyError(f"users without a {axis} label: {missing[:5]}")
            means, sizes = {}, {}
            for g in AXIS_LABELS[axis]:
                member = np.array([labels[u] == g for u in users])
                sizes[g] = int(member.sum())
                means[g] = float(vals[member].mean()) if member.any() else None
            report.per_group[axis] = means
            report.group_sizes[axis] = sizes
    return report


@torch.no_grad()
def score_users(model: SASRec, sequences: Sequence[UserSequence], split: str, exclude_seen: bool = False,
                batch_size: int = 256) -> tuple[list[int], np.ndarray]:
    """Target ranks for every user under ``split``."""
    model.eval()
    L = model.config.max_len
    users, ranks = [], []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        pairs = [eval_inputs(s, split) for s in chunk]
        tokens = torch.from_numpy(pad_batch([p[0] for p in pairs], L))
        targets = torch.tensor([p[1] for p in pairs])
        scores = model.score(model.hidden(tokens)[:, -1])
        if not torch.isfinite(scores).all():
            raise ValueError("model produced non-finite scores")
        if exclude_seen:
            for row, (hist, tgt) in enumerate(pairs):
                seen = torch.from_numpy(np.setdiff1d(hist, [tgt])) - 1
                scores[row, seen] = float("-inf")
        ranks.append(_ranks(scores, targets).numpy())
        users.extend(s.user for s in chunk)
    return users, np.concatenate(ranks) if ranks else np.zeros(0, np.int64)


def evaluate(
    model: SASRec,
    sequences: Sequence[UserSequence],
    assignment: GroupAssignment | None = None,
    split: str = "test",
    k: int = 20,
    exclude_seen: bool = False,
) -> MetricReport:
    users, ranks = score_users(model, sequences, split, exclude_seen)
    per_user = {u: ndcg_at_k(int(r), k) for u, r in zip(users, ranks)}
    report = aggregate(per_user, assignment, k, split)
    report.meta["exclude_seen"] = exclude_seen
    report.meta["tie_policy"] = "pessimistic"
    return report


@dataclass
class SignificanceResult:
    method: str
    baseline: str
    t_statistic: float
    p_value: float
    n: int
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def paired_t_test(a, b, method: str = "a", baseline: str = "b") -> SignificanceResult:
    """Two-sided paired t-test on ``a - b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have the same length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return SignificanceResult(method, baseline, 0.0, 1.0, n, degenerate=True)
        return SignificanceResult(method, baseline, math.copysign(math.inf, mean), 0.0, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return SignificanceResult(method, baseline, float(t), min(p, 1.0), n)
