"""Interaction ingestion, core-k filtering and leave-one-out sequence splits."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, FormatError, ParseError

PAD = 0
RETAILROCKET_HEADER = ["timestamp", "visitorid", "event", "itemid", "transactionid"]

_INTERACTION_DTYPE = np.dtype(
    [("user", "<i4"), ("item", "<i4"), ("timestamp", "<i8"), ("source_order", "<i8")]
)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    source_order: int


class InteractionLog:
    """Columnar store of raw interactions, as read from one source file."""

    def __init__(self, user_ids, item_ids, timestamps, source_order):
        self.user_ids = np.asarray(user_ids, dtype=object)
        self.item_ids = np.asarray(item_ids, dtype=object)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.source_order = np.asarray(source_order, dtype=np.int64)
        n = len(self.user_ids)
        if not (len(self.item_ids) == len(self.timestamps) == len(self.source_order) == n):
            raise ValueError("column lengths differ")
        if n and self.timestamps.min() < 0:
            raise DataError("negative timestamp")

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "InteractionLog":
        rows = list(interactions)
        return cls(
            [r.user_id for r in rows],
            [r.item_id for r in rows],
            np.array([r.timestamp for r in rows], dtype=np.int64),
            np.array([r.source_order for r in rows], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.user_ids)

    def __getitem__(self, i: int) -> Interaction:
        return Interaction(
            str(self.user_ids[i]),
            str(self.item_ids[i]),
            int(self.timestamps[i]),
            int(self.source_order[i]),
        )

    def __iter__(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "InteractionLog":
        return InteractionLog(
            self.user_ids[idx], self.item_ids[idx], self.timestamps[idx], self.source_order[idx]
        )


def _text_stream(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="latin-1", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("latin-1"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="latin-1", newline=""), False


def _to_int(text: str, what: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"non-integer {what} {text!r}", line) from None


def parse_retailrocket(source) -> InteractionLog:
    """Read the `view` events of a Retailrocket ``events.csv``.

    ``source`` may be a path, raw bytes or an open (binary or text) stream.
    """
    stream, owned = _text_stream(source)
    users, items, stamps, order = [], [], [], []
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RETAILROCKET_HEADER:
            raise FormatError(
                "missing Retailrocket header 'timestamp,visitorid,event,itemid,transactionid'"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 columns, got {len(row)}", lineno)
            ts = _to_int(row[0], "timestamp", lineno)
            if row[2] != "view":
                continue
            if not row[1] or not row[3]:
                raise ParseError("empty visitorid or itemid", lineno)
            users.append(row[1])
            items.append(row[3])
            stamps.append(ts)
            order.append(lineno - 2)
    finally:
        if owned:
            stream.close()
    return InteractionLog(users, items, stamps, order)


def parse_movielens(source) -> InteractionLog:
    """Read a MovieLens-1M ``ratings.dat``; every rating counts as an interaction."""
    stream, owned = _text_stream(source)
    users, items, stamps, order = [], [], [], []
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("::")
            if len(fields) != 4:
                raise ParseError(f"expected 4 '::'-separated fields, got {len(fields)}", lineno)
            _to_int(fields[2], "rating", lineno)
            users.append(fields[0])
            items.append(fields[1])
            stamps.append(_to_int(fields[3], "timestamp", lineno))
            order.append(lineno - 1)
    finally:
        if owned:
            stream.close()
    return InteractionLog(users, items, stamps, order)


PARSERS = {"retailrocket": parse_retailrocket, "ml1m": parse_movielens}


@dataclass
class Dataset:
    """Filtered interactions with dense indexes.

    Users are indexed ``0..N-1``; items ``1..|I|`` (0 is padding). Interaction
    columns are stored sorted by ``source_order``.
    """

    user_ids: list[str]
    item_ids: list[str]
    user: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    source_order: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return len(self.user)

    def stats(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_interactions,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and all(
                np.array_equal(getattr(self, c), getattr(other, c))
                for c in ("user", "item", "timestamp", "source_order")
            )
        )

    def _records(self) -> np.ndarray:
        rec = np.empty(self.n_interactions, dtype=_INTERACTION_DTYPE)
        rec["user"] = self.user
        rec["item"] = self.item
        rec["timestamp"] = self.timestamp
        rec["source_order"] = self.source_order
        return rec

    def _payload(self) -> tuple[bytes, bytes]:
        buf = io.BytesIO()
        np.save(buf, self._records(), allow_pickle=False)
        index = json.dumps(
            {"users": self.user_ids, "items": self.item_ids}, separators=(",", ":")
        ).encode()
        return buf.getvalue(), index

    def content_hash(self) -> str:
        arrays, index = self._payload()
        h = hashlib.sha256()
        h.update(arrays)
        h.update(index)
        return h.hexdigest()

    def save(self, out_dir) -> str:
        """Write ``interactions.npy`` + ``index.json`` and return the content hash."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arrays, index = self._payload()
        (out / "interactions.npy").write_bytes(arrays)
        (out / "index.json").write_bytes(index)
        return self.content_hash()

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        d = Path(in_dir)
        try:
            rec = np.load(d / "interactions.npy", allow_pickle=False)
            index = json.loads((d / "index.json").read_text())
        except FileNotFoundError as e:
            raise DataError(f"dataset artifact missing: {e.filename}") from None
        return cls(
            index["users"],
            index["items"],
            rec["user"].copy(),
            rec["item"].copy(),
            rec["timestamp"].copy(),
            rec["source_order"].copy(),
        )


def core_filter(interactions, k: int) -> Dataset:
    """Iteratively drop users and items with fewer than ``k`` interactions.

    The fixpoint of this monotone removal is unique, so the result does not
    depend on input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    log = interactions if isinstance(interactions, InteractionLog) else InteractionLog.from_interactions(interactions)
    if len(np.unique(log.source_order)) != len(log):
        raise DataError("source_order values are not unique")
    log = log.take(np.argsort(log.source_order, kind="stable"))

    u, _ = pd.factorize(log.user_ids)
    i, _ = pd.factorize(log.item_ids)
    keep = np.ones(len(log), dtype=bool)
    while True:
        ucount = np.bincount(u[keep], minlength=u.max(initial=-1) + 1)
        icount = np.bincount(i[keep], minlength=i.max(initial=-1) + 1)
        drop = keep & ((ucount[u] < k) | (icount[i] < k))
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise DataError("dataset eliminated by core filter")

    log = log.take(np.flatnonzero(keep))
    user_codes, user_uniques = pd.factorize(log.user_ids)
    item_codes, item_uniques = pd.factorize(log.item_ids)
    return Dataset(
        user_ids=[str(x) for x in user_uniques],
        item_ids=[str(x) for x in item_uniques],
        user=user_codes.astype(np.int32),
        item=(item_codes + 1).astype(np.int32),
        timestamp=log.timestamps.copy(),
        source_order=log.source_order.copy(),
    )


@dataclass(frozen=True, eq=False)
class UserSequence:
    user: int
    user_id: str
    history: np.ndarray

    @property
    def train_prefix(self) -> np.ndarray:
        return self.history[:-2]

    @property
    def val_target(self) -> int:
        return int(self.history[-2])

    @property
    def test_target(self) -> int:
        return int(self.history[-1])

    def __len__(self) -> int:
        return len(self.history)


def build_sequences(dataset: Dataset) -> list[UserSequence]:
    """Chronological per-user histories ordered by (timestamp, source_order)."""
    order = np.lexsort((dataset.source_order, dataset.timestamp, dataset.user))
    users = dataset.user[order]
    items = dataset.item[order].astype(np.int64)
    bounds = np.flatnonzero(np.diff(users)) + 1
    seqs = []
    for chunk_users, chunk in zip(np.split(users, bounds), np.split(items, bounds)):
        if len(chunk) < 3:
            raise DataError(
                f"user {dataset.user_ids[chunk_users[0]]} has {len(chunk)} interactions; need >= 3"
            )
        u = int(chunk_users[0])
        seqs.append(UserSequence(u, dataset.user_ids[u], chunk))
    return seqs


@dataclass(frozen=True, eq=False)
class PaddedInput:
    tokens: np.ndarray
    valid_mask: np.ndarray

    @property
    def L(self) -> int:
        return len(self.tokens)


def pad_truncate(sequence: Sequence[int], L: int) -> PaddedInput:
    """Keep the ``L`` most recent items, left-padding with 0."""
    if L < 1:
        raise ValueError("L must be >= 1")
    seq = np.asarray(sequence, dtype=np.int64)[-L:] if len(sequence) else np.zeros(0, np.int64)
    tokens = np.zeros(L, dtype=np.int64)
    mask = np.zeros(L, dtype=bool)
    if len(seq):
        tokens[L - len(seq):] = seq
        mask[L - len(seq):] = True
    return PaddedInput(tokens, mask)


def pad_batch(sequences: Sequence[Sequence[int]], L: int) -> np.ndarray:
    """Stack left-padded token rows into a ``(B, L)`` array."""
    return np.stack([pad_truncate(s, L).tokens for s in sequences]) if sequences else np.zeros((0, L), np.int64)


def dedup_pairs(log: InteractionLog) -> InteractionLog:
    """Keep only the earliest (timestamp, source_order) event of each (user, item) pair."""
    order = np.lexsort((log.source_order, log.timestamps))
    frame = pd.DataFrame({"u": np.asarray(log.user_ids, dtype=object)[order],
                          "i": np.asarray(log.item_ids, dtype=object)[order]})
    first = order[~frame.duplicated(["u", "i"]).to_numpy()]
    return log.take(np.sort(first))


def prepare(kind: str, input_path, k: int = 5, dedup: bool = False) -> Dataset:
    try:
        parser = PARSERS[kind]
    except KeyError:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(PARSERS)}") from None
    if not Path(input_path).exists():
        raise DataError(f"input file not found: {input_path}")
    log = parser(input_path)
    return core_filter(dedup_pairs(log) if dedup else log, k)
