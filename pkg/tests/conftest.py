import numpy as np
import pytest
import torch

from seqrec_dro.data import InteractionLog, build_sequences, core_filter
from seqrec_dro.model import ModelConfig, SASRec
from seqrec_dro.synthetic import SyntheticConfig, generate
from seqrec_dro.train import TrainData


def synthetic_dataset(n_users=50, seed=0, **kw):
    rows, _ = generate(SyntheticConfig(n_users=n_users, seed=seed, add_to_cart_prob=0.0, **kw))
    log = InteractionLog(
        [str(r[1]) for r in rows], [str(r[3]) for r in rows], [r[0] for r in rows], list(range(len(rows)))
    )
    return core_filter(log, 5)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_dataset(50, seed=3)


@pytest.fixture(scope="session")
def small_sequences(small_dataset):
    return build_sequences(small_dataset)


@pytest.fixture
def small_data(small_dataset):
    return TrainData.from_dataset(small_dataset)


def tiny_model(n_items=12, d=8, L=6, blocks=1, seed=0, dropout=0.0):
    cfg = ModelConfig(catalogue_size=n_items, embed_dim=d, ff_dim=d, num_blocks=blocks,
                      num_heads=1, dropout_rate=dropout, max_len=L, seed=seed)
    return SASRec(cfg)


def tiny_batch(n_items=12, B=4, L=6, seed=0):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, n_items + 1, size=(B, L))
    targets = rng.integers(1, n_items + 1, size=(B, L))
    # left padding of varying length, never a fully empty row
    for b in range(B):
        pad = int(rng.integers(0, L - 1))
        tokens[b, :pad] = 0
        targets[b, :pad] = 0
    return torch.from_numpy(tokens), torch.from_numpy(targets)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, list[tuple[str, str]]] = {}


@pytest.fixture
def criterion():
    def record(number: int, status: str, detail: str = ""):
        ACCEPTANCE.setdefault(number, []).append((status, detail))
        print(f"criterion {number}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        for status, detail in ACCEPTANCE[n]:
            terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
