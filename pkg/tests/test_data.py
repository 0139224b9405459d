import io
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqrec_dro.data import (
    PAD, Dataset, Interaction, InteractionLog, build_sequences, core_filter, dedup_pairs, pad_batch,
    pad_truncate, parse_movielens, parse_retailrocket, prepare,
)
from seqrec_dro.errors import DataError, FormatError, ParseError

RR_HEADER = "timestamp,visitorid,event,itemid,transactionid\n"


def test_retailrocket_row_maps_fields():
    log = parse_retailrocket((RR_HEADER + "1433221332117,257597,view,355908,\n").encode())
    assert list(log) == [Interaction("257597", "355908", 1433221332117, 0)]


def test_retailrocket_keeps_views_only():
    text = RR_HEADER + "1,1,view,10,\n2,1,addtocart,10,\n3,1,transaction,10,99\n4,2,view,11,\n"
    log = parse_retailrocket(io.StringIO(text))
    assert [(i.user_id, i.item_id) for i in log] == [("1", "10"), ("2", "11")]


def test_retailrocket_header_only_is_empty():
    assert len(parse_retailrocket(RR_HEADER.encode())) == 0


def test_retailrocket_missing_header():
    with pytest.raises(FormatError):
        parse_retailrocket(b"1,1,view,10,\n")


@pytest.mark.parametrize("row,line", [("1,1,view,10\n", 2), ("x,1,view,10,\n", 2)])
def test_retailrocket_malformed_row_reports_line(row, line):
    with pytest.raises(ParseError) as e:
        parse_retailrocket((RR_HEADER + row).encode())
    assert e.value.line == line
    assert f"line {line}" in str(e.value)


def test_movielens_row_maps_fields():
    log = parse_movielens(b"1::1193::5::978300760\n")
    assert list(log) == [Interaction("1", "1193", 978300760, 0)]


def test_movielens_empty_stream():
    assert len(parse_movielens(io.BytesIO(b""))) == 0


def test_movielens_malformed_line_number():
    with pytest.raises(ParseError) as e:
        parse_movielens(b"1::1::5::1\n1::2::5\n")
    assert e.value.line == 2


def test_negative_timestamp_rejected():
    with pytest.raises(DataError):
        parse_movielens(b"1::1::5::-4\n")


def _log(rows):
    return InteractionLog.from_interactions(
        Interaction(str(u), str(i), t, n) for n, (u, i, t) in enumerate(rows)
    )


def test_core_filter_removes_short_user_and_orphans():
    rows = [(u, i, 10 * u + i) for u in range(3) for i in range(3)]
    rows += [(9, 7, 100), (9, 0, 101)]  # user 9 has k-1 events; item 7 only via user 9
    ds = core_filter(_log(rows), 3)
    assert ds.user_ids == ["0", "1", "2"]
    assert ds.item_ids == ["0", "1", "2"]
    assert ds.n_interactions == 9


def test_core_filter_cascades():
    # dropping user "c" starves item "z", which then starves user "b"
    rows = [("a", x, 0) for x in "pq"] + [("b", x, 0) for x in "pz"] + [("c", "z", 0)]
    rows += [("d", x, 0) for x in "pq"]
    ds = core_filter(_log(rows), 2)
    assert sorted(ds.user_ids) == ["a", "d"]
    assert sorted(ds.item_ids) == ["p", "q"]


def test_core_filter_empty_fixpoint():
    with pytest.raises(DataError, match="eliminated by core filter"):
        core_filter(_log([(1, 1, 0)]), 5)


def _naive_core(rows, k):
    rows = list(rows)
    while True:
        uc, ic = {}, {}
        for u, i, _ in rows:
            uc[u] = uc.get(u, 0) + 1
            ic[i] = ic.get(i, 0) + 1
        keep = [r for r in rows if uc[r[0]] >= k and ic[r[1]] >= k]
        if len(keep) == len(rows):
            return keep
        rows = keep


interaction_rows = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(0, 50)), min_size=1, max_size=120
)


@settings(max_examples=150, deadline=None)
@given(interaction_rows, st.integers(1, 4), st.randoms(use_true_random=False))
def test_core_filter_fixpoint_and_order_independence(rows, k, rnd):
    expected = _naive_core(rows, k)
    if not expected:
        with pytest.raises(DataError):
            core_filter(_log(rows), k)
        return
    ds = core_filter(_log(rows), k)
    assert ds.n_interactions == len(expected)
    users = np.bincount(ds.user)
    items = np.bincount(ds.item)[1:]
    assert users.min() >= k and items.min() >= k
    # permuting the file order changes indices but not the surviving multiset
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    shuffled = InteractionLog.from_interactions(
        Interaction(str(rows[p][0]), str(rows[p][1]), rows[p][2], n) for n, p in enumerate(perm)
    )
    other = core_filter(shuffled, k)

    def multiset(d):
        return sorted((d.user_ids[u], d.item_ids[i - 1], int(t)) for u, i, t in zip(d.user, d.item, d.timestamp))

    assert multiset(other) == multiset(ds)


def test_indices_are_dense_and_padding_free(small_dataset):
    assert set(small_dataset.user.tolist()) == set(range(small_dataset.n_users))
    assert set(small_dataset.item.tolist()) == set(range(1, small_dataset.n_items + 1))
    assert PAD not in small_dataset.item


def test_leave_one_out_split():
    rows = [("u", x, t) for t, x in enumerate("abcde")]
    seq, = build_sequences(core_filter(_log(rows), 1))
    ids = ["abcde".index(x) + 1 for x in "abcde"]
    assert seq.train_prefix.tolist() == ids[:3]
    assert (seq.val_target, seq.test_target) == (ids[3], ids[4])


def test_equal_timestamps_use_source_order():
    log = InteractionLog(["u"] * 4, ["a", "b", "c", "d"], [5, 5, 1, 5], [0, 3, 1, 2])
    seq, = build_sequences(core_filter(log, 1))
    ds_items = core_filter(log, 1).item_ids
    assert [ds_items[i - 1] for i in seq.history] == ["c", "a", "d", "b"]


def test_user_with_too_few_events_rejected():
    with pytest.raises(DataError):
        build_sequences(core_filter(_log([("u", "a", 0), ("u", "b", 1)]), 1))


def test_repeated_items_retained():
    rows = [("u", x, t) for t, x in enumerate("aabba")]
    seq, = build_sequences(core_filter(_log(rows), 1))
    assert len(seq.history) == 5


def test_dataset_roundtrip(tmp_path, small_dataset):
    digest = small_dataset.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back == small_dataset
    assert back.content_hash() == digest


def test_pad_truncate_examples():
    p = pad_truncate([7, 8, 9], 5)
    assert p.tokens.tolist() == [0, 0, 7, 8, 9]
    assert p.valid_mask.tolist() == [False, False, True, True, True]
    long = list(range(1, 301))
    assert pad_truncate(long, 200).tokens.tolist() == long[-200:]
    empty = pad_truncate([], 3)
    assert empty.tokens.tolist() == [0, 0, 0] and not empty.valid_mask.any()


@given(st.lists(st.integers(1, 1000), max_size=40), st.integers(1, 30))
def test_pad_truncate_properties(seq, L):
    p = pad_truncate(seq, L)
    n = min(len(seq), L)
    assert p.L == L
    assert int(p.valid_mask.sum()) == n
    assert p.tokens[p.valid_mask].tolist() == seq[len(seq) - n:]
    assert (p.tokens[~p.valid_mask] == 0).all()
    # valid positions are a suffix
    assert p.valid_mask.tolist() == sorted(p.valid_mask.tolist())


def test_pad_batch_shape():
    assert pad_batch([[1], [2, 3, 4]], 2).tolist() == [[0, 1], [3, 4]]


def test_dedup_keeps_first_event_per_pair():
    log = InteractionLog(["u", "u", "v", "u"], ["a", "a", "a", "b"], [3, 1, 2, 4], [0, 1, 2, 3])
    out = dedup_pairs(log)
    assert [(i.user_id, i.item_id, i.timestamp) for i in out] == [("u", "a", 1), ("v", "a", 2), ("u", "b", 4)]


def test_prepare_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.csv"
    with pytest.raises(DataError, match="nope.csv"):
        prepare("retailrocket", missing)
