import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from seqrec_dro.evaluation import MetricReport, aggregate, evaluate, ndcg_at_k, paired_t_test, rank_target
from seqrec_dro.groups import annotate
from seqrec_dro.model import SASRec

from conftest import tiny_model


def test_rank_examples():
    s = np.arange(100, dtype=float)
    assert rank_target(s, 100) == 1
    assert rank_target(s, 1) == 100
    assert rank_target([1.0, 2.0, 2.0], 2) == 2  # pessimistic ties
    with pytest.raises(ValueError):
        rank_target([1.0, np.nan], 1)
    with pytest.raises(IndexError):
        rank_target([1.0], 0)


def _sort_oracle(scores, target):
    # pessimistic: the target goes after every tied item
    tied_last = sorted(range(len(scores)), key=lambda j: (-scores[j], j == target - 1))
    return tied_last.index(target - 1) + 1


def test_rank_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = rng.integers(0, 30, 50).astype(float) if rng.random() < 0.5 else rng.normal(size=50)
        t = int(rng.integers(1, 51))
        assert rank_target(s, t) == _sort_oracle(list(s), t)


def test_ndcg_examples():
    assert ndcg_at_k(1, 20) == 1.0
    assert ndcg_at_k(3, 20) == 0.5
    assert ndcg_at_k(21, 20) == 0.0
    assert ndcg_at_k(20, 20) == pytest.approx(1 / math.log2(21))


@given(st.integers(1, 500), st.integers(1, 500), st.integers(1, 100))
def test_ndcg_monotone(r, extra, k):
    assert ndcg_at_k(r + extra, k) <= ndcg_at_k(r, k)
    assert ndcg_at_k(r, k) <= ndcg_at_k(r, k + extra)
    assert 0.0 <= ndcg_at_k(r, k) <= 1.0


class FixedOrder(SASRec):
    """Scores every item by a constant, input-independent vector."""

    def __init__(self, config, scores):
        super().__init__(config)
        self.fixed = torch.as_tensor(scores, dtype=torch.float32)

    def score(self, h):
        return self.fixed.expand(h.shape[0], -1).clone()


def test_evaluate_against_fixed_ranking(small_dataset, small_sequences):
    rng = np.random.default_rng(1)
    n = small_dataset.n_items
    fixed = rng.permutation(n).astype(float)
    base = tiny_model(n_items=n, L=10)
    model = FixedOrder(base.config, fixed)
    rep = evaluate(model, small_sequences, split="test", k=20)
    expected = []
    for s in small_sequences:
        rank = int((fixed >= fixed[s.test_target - 1]).sum())
        expected.append(1 / math.log2(rank + 1) if rank <= 20 else 0.0)
    assert rep.overall == pytest.approx(np.mean(expected), abs=1e-12)


def test_group_means_recombine(small_sequences, small_dataset):
    model = tiny_model(n_items=small_dataset.n_items, L=10, seed=3)
    a = annotate(small_sequences, "pop", split_pop="33")
    rep = evaluate(model, small_sequences, a)
    n = sum(rep.group_sizes["pop"].values())
    total = sum(rep.group_sizes["pop"][g] * (rep.per_group["pop"][g] or 0.0) for g in rep.per_group["pop"])
    assert total / n == pytest.approx(rep.overall, abs=1e-9)
    assert rep.overall == pytest.approx(np.mean(list(rep.per_user.values())), abs=1e-12)
    assert all(0 <= v <= 1 for v in rep.per_user.values())


def test_intersecting_report_has_six_groups(small_sequences, small_dataset):
    model = tiny_model(n_items=small_dataset.n_items, L=10)
    rep = evaluate(model, small_sequences, annotate(small_sequences, "intersect", "33", "33"))
    assert sum(len(v) for v in rep.per_group.values()) == 6


def test_evaluate_order_independent_and_deterministic(small_sequences, small_dataset):
    model = tiny_model(n_items=small_dataset.n_items, L=10, seed=5)
    a = evaluate(model, small_sequences, split="val")
    b = evaluate(model, list(reversed(small_sequences)), split="val")
    assert a.per_user == b.per_user and a.overall == pytest.approx(b.overall, abs=1e-15)


def test_missing_label_is_an_error(small_sequences, small_dataset):
    model = tiny_model(n_items=small_dataset.n_items, L=10)
    a = annotate(small_sequences, "pop", split_pop="33")
    a.labels_pop.pop(small_sequences[0].user)
    with pytest.raises(KeyError):
        evaluate(model, small_sequences, a)


def test_report_roundtrip(tmp_path):
    rep = aggregate({0: 1.0, 1: 0.5, 2: 0.0}, None, 20, "test")
    rep.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.per_user == rep.per_user and back.overall == rep.overall


def test_t_test_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random(30)
        b = a + rng.normal(0.02, 0.1, 30)
        got = paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert got.t_statistic == pytest.approx(ref.statistic, abs=1e-6)
        assert got.p_value == pytest.approx(ref.pvalue, abs=1e-6)
        assert got.n == 30


def test_t_test_degenerate_cases():
    same = paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert same.degenerate and same.p_value == 1.0 and not same.significant
    shifted = paired_t_test([2, 2, 2, 2], [1, 1, 1, 1])
    assert shifted.degenerate and shifted.p_value == 0.0 and shifted.significant
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])


@settings(deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=40))
def test_t_test_antisymmetric(pairs):
    a, b = np.array(pairs).T
    x, y = paired_t_test(a, b), paired_t_test(b, a)
    assert x.p_value == pytest.approx(y.p_value, abs=1e-12)
    if math.isfinite(x.t_statistic):
        assert x.t_statistic == pytest.approx(-y.t_statistic, abs=1e-12)
    assert 0.0 <= x.p_value <= 1.0
