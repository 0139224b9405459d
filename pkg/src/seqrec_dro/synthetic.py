"""Synthetic view logs with an under-represented user group.

Majority users browse a small "head" pool of items along a fixed cycle.
Minority users walk the whole catalogue along a different cycle, so on head
items the two groups disagree about what comes next and most tail items are
only ever seen by the minority. The log is written in the Retailrocket
``events.csv`` layout so the regular ``prepare`` path reads it.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticConfig:
    n_users: int = 600
    minority_fraction: float = 0.1
    n_items: int = 150
    n_head_items: int = 50
    min_len: int = 8
    mean_extra_len: float = 12.0
    follow_prob: float = 0.8
    add_to_cart_prob: float = 0.05
    seed: int = 0


def _cycle(rng, items) -> dict[int, int]:
    perm = rng.permutation(items)
    return {int(a): int(b) for a, b in zip(perm, np.roll(perm, -1))}


def _walk(rng, transition: dict[int, int], pool: np.ndarray, length: int, follow_prob: float) -> list[int]:
    cur = int(rng.choice(pool))
    seq = [cur]
    for _ in range(length - 1):
        cur = transition[cur] if rng.random() < follow_prob else int(rng.choice(pool))
        seq.append(cur)
    return seq


def generate(cfg: SyntheticConfig) -> tuple[list[tuple[int, int, str, int]], dict[int, str]]:
    """Return ``(rows, user_kind)`` where rows are ``(timestamp, user, event, item)``."""
    rng = np.random.default_rng(cfg.seed)
    items = np.arange(1, cfg.n_items + 1)
    head = rng.choice(items, cfg.n_head_items, replace=False)
    majority_next = _cycle(rng, head)
    minority_next = _cycle(rng, items)

    n_minority = int(round(cfg.minority_fraction * cfg.n_users))
    kinds = np.array(["minority"] * n_minority + ["majority"] * (cfg.n_users - n_minority))
    rng.shuffle(kinds)
    rows = []
    clock = 1_400_000_000_000
    for u, kind in enumerate(kinds):
        length = cfg.min_len + int(rng.poisson(cfg.mean_extra_len))
        if kind == "majority":
            seq = _walk(rng, majority_next, head, length, cfg.follow_prob)
        else:
            seq = _walk(rng, minority_next, items, length, cfg.follow_prob)
        for item in seq:
            clock += int(rng.integers(1, 1000))
            rows.append((clock, u, "view", item))
            if rng.random() < cfg.add_to_cart_prob:
                rows.append((clock, u, "addtocart", item))
    return rows, {u: str(k) for u, k in enumerate(kinds)}


def write_events(cfg: SyntheticConfig, path) -> dict[int, str]:
    """Write a Retailrocket-style ``events.csv``; returns each user's kind."""
    rows, kinds = generate(cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "visitorid", "event", "itemid", "transactionid"])
        for ts, user, event, item in rows:
            w.writerow([ts, user, event, item, ""])
    return kinds


def config_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)
