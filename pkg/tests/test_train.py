import csv
import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from seqrec_dro.errors import ConfigError
from seqrec_dro.groups import annotate
from seqrec_dro.model import load_checkpoint
from seqrec_dro.evaluation import evaluate
from seqrec_dro.objectives import ObjectiveConfig
from seqrec_dro.train import (
    ALPHA_GRID, ETA_GRID, BatchSampler, RunConfig, SweepError, SweepSpec, TrainData, seed_streams, sweep,
    train_model, train_run, training_arrays,
)

MODEL = dict(embed_dim=8, ff_dim=8, num_blocks=1, max_len=12, dropout_rate=0.0)


def run_cfg(**kw):
    base = dict(model=MODEL, batch_size=8, epochs=2, batches_per_epoch=4, seed=0)
    base.update(kw)
    return RunConfig(**base)


def test_grids():
    assert ETA_GRID == (1e-3, 5e-3, 1e-2, 5e-2, 0.1)
    assert ALPHA_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
    assert RunConfig().lr == 0.001 and RunConfig().batches_per_epoch == 128


def test_seed_streams_distinct_and_stable():
    a = seed_streams(0)
    assert a == seed_streams(0)
    assert len(set(a.values())) == 3
    assert a != seed_streams(1)


def test_sampler_full_batch_is_permutation():
    s = BatchSampler(10, 10, np.random.default_rng(0))
    for _ in range(3):
        assert sorted(s.next().tolist()) == list(range(10))


def test_sampler_same_seed_same_batches():
    a = BatchSampler(7, 3, np.random.default_rng(5))
    b = BatchSampler(7, 3, np.random.default_rng(5))
    for _ in range(10):
        assert np.array_equal(a.next(), b.next())


def test_sampler_uniform_chi_square():
    n, B = 37, 8
    s = BatchSampler(n, B, np.random.default_rng(1))
    counts = np.bincount(np.concatenate([s.next() for _ in range(10_000)]), minlength=n)
    assert stats.chisquare(counts).pvalue > 1e-3
    expected = 10_000 * B / n
    assert np.abs(counts - expected).max() <= 3 * math.sqrt(expected)


def test_training_arrays_use_prefix_only(small_sequences):
    inputs, targets = training_arrays(small_sequences, 12)
    for s, x, y in zip(small_sequences, inputs, targets):
        p = s.train_prefix
        assert y[y > 0].tolist() == p[1:][-12:].tolist()
        assert x[x > 0].tolist() == p[:-1][-12:].tolist()
        # the validation and test targets never appear as training targets
        assert len(y[y > 0]) <= len(p) - 1


def test_training_never_sees_held_out_items(small_data, monkeypatch):
    import seqrec_dro.train as train_mod

    seen = []
    real = train_mod.batch_losses

    def spy(model, tokens, targets, **kw):
        seen.append((tokens.clone(), targets.clone()))
        return real(model, tokens, targets, **kw)

    monkeypatch.setattr(train_mod, "batch_losses", spy)
    train_model(run_cfg(epochs=1, batch_size=len(small_data.sequences), batches_per_epoch=1), small_data)
    tokens, targets = seen[0]
    by_user = {tuple(s.train_prefix[1:][-12:].tolist()) for s in small_data.sequences}
    for row in targets:
        assert tuple(row[row > 0].tolist()) in by_user


def test_budget_and_determinism(small_data):
    run = run_cfg(epochs=3, batches_per_epoch=5)
    a = train_model(run, small_data)
    b = train_model(run, small_data)
    assert a.steps == 15 == len(a.trace)
    assert len(a.val_scores) == 3
    assert [r["loss"] for r in a.trace] == [r["loss"] for r in b.trace]
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)
    assert a.best_score == max(a.val_scores)
    assert a.best_epoch == 1 + a.val_scores.index(max(a.val_scores))


def test_dropout_does_not_change_batch_order(small_data, monkeypatch):
    import seqrec_dro.train as train_mod

    real = train_mod.batch_losses

    def batches(dropout):
        users = []

        def spy(model, tokens, targets, user_ids=None, **kw):
            users.append(list(user_ids))
            return real(model, tokens, targets, user_ids=user_ids, **kw)

        monkeypatch.setattr(train_mod, "batch_losses", spy)
        train_model(run_cfg(model={**MODEL, "dropout_rate": dropout}), small_data)
        return users

    assert batches(0.0) == batches(0.3)


def test_loss_decreases(small_data):
    res = train_model(run_cfg(epochs=5, batches_per_epoch=8, lr=0.01), small_data)
    per_epoch = [np.mean([r["loss"] for r in res.trace if r["epoch"] == e]) for e in range(1, 6)]
    assert per_epoch[-1] < per_epoch[0]
    assert stats.linregress(range(5), per_epoch).slope < 0


def test_cvar_alpha_one_matches_erm(small_data):
    erm = train_model(run_cfg(), small_data)
    cvar = train_model(run_cfg(objective=ObjectiveConfig("CVaR", alpha=1.0)), small_data)
    assert [r["loss"] for r in erm.trace] == [r["loss"] for r in cvar.trace]


def test_group_objective_needs_assignment(small_data):
    with pytest.raises(ConfigError):
        train_model(run_cfg(objective=ObjectiveConfig("GDRO", eta=0.1)), small_data)


def test_gdro_trace_has_weights(small_dataset, small_sequences):
    a = annotate(small_sequences, "pop", split_pop="33")
    data = TrainData.from_dataset(small_dataset, a)
    res = train_model(run_cfg(objective=ObjectiveConfig("GDRO", eta=0.1)), data)
    row = res.trace[-1]
    assert sum(row[f"omega[{g}]"] for g in ("niche", "diverse", "popular")) == pytest.approx(1.0)


def test_train_run_artifacts(tmp_path, small_data):
    m = train_run(run_cfg(out_dir=str(tmp_path / "run")), small_data)
    out = tmp_path / "run"
    assert {"checkpoint.bin", "checkpoint.json", "trace.csv", "manifest.json"} <= {p.name for p in out.iterdir()}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["dataset_hash"] == small_data.dataset_hash and len(manifest["val_scores"]) == 2
    with open(out / "trace.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8
    model, _ = load_checkpoint(out / "checkpoint")
    again = evaluate(model, small_data.sequences, split="val").overall
    assert again == pytest.approx(m["best_val_ndcg"], abs=1e-6)


def test_sweep_single_point(tmp_path, small_data):
    base = run_cfg(objective=ObjectiveConfig("CVaR", alpha=0.5), out_dir=str(tmp_path / "sw"))
    out = sweep(SweepSpec(base, "alpha", (0.5,)), small_data)
    assert out["selected"] == 0.5 and len(out["scores"]) == 1
    assert json.loads((tmp_path / "sw" / "sweep.json").read_text())["selected"] == 0.5


def test_sweep_eta_grid(tmp_path, small_dataset, small_sequences):
    a = annotate(small_sequences, "pop", split_pop="33")
    data = TrainData.from_dataset(small_dataset, a)
    base = run_cfg(objective=ObjectiveConfig("GDRO", eta=0.1), epochs=1, batches_per_epoch=2,
                   out_dir=str(tmp_path / "sw"))
    spec = SweepSpec.default(base)
    out = sweep(spec, data)
    assert len(out["scores"]) == 5 and spec.values == ETA_GRID
    best = max(s["val_ndcg"] for s in out["scores"])
    assert out["selected"] == min(s["value"] for s in out["scores"] if s["val_ndcg"] == best)


def test_sweep_failure_keeps_partial_results(tmp_path, small_data, monkeypatch):
    import seqrec_dro.train as train_mod

    real = train_mod.train_run

    def flaky(run, data=None):
        if run.objective.alpha == 0.2:
            raise RuntimeError("boom")
        return real(run, data)

    monkeypatch.setattr(train_mod, "train_run", flaky)
    base = run_cfg(objective=ObjectiveConfig("CVaR", alpha=0.1), epochs=1, batches_per_epoch=1,
                   out_dir=str(tmp_path / "sw"))
    with pytest.raises(SweepError):
        sweep(SweepSpec(base, "alpha", (0.1, 0.2)), small_data)
    partial = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    assert [s["value"] for s in partial["scores"]] == [0.1] and "0.2" in partial["errors"]


def test_sweep_rejects_wrong_param():
    with pytest.raises(ConfigError):
        SweepSpec(run_cfg(), "alpha", (0.5,))
