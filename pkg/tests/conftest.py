import numpy as np
import pytest

from schubert.config import ArchConfig
from schubert.data import build_vocab, collate, generate_synthetic_corpus, make_examples


def small_config(ell=2, h=12, a=(2, 3), k=(4, 3), v=(3, 5), f=(8, 6), vocab=40, positions=16):
    return ArchConfig(
        ell=ell, h=h, a=list(a), k=list(k), v=list(v), f=list(f), vocab_size=vocab, max_positions=positions
    )


def random_batch(config, rng, batch=3, seq=7, n_masked=4):
    """Hand-built batch with padding on every row but the first."""
    from schubert.data import Batch

    tokens = rng.integers(5, config.vocab_size, size=(batch, seq))
    lengths = [seq] + list(rng.integers(3, seq + 1, size=batch - 1))
    mask = np.arange(seq)[None, :] < np.asarray(lengths)[:, None]
    tokens = np.where(mask, tokens, 0)
    segments = (np.arange(seq)[None, :] >= np.asarray(lengths)[:, None] // 2).astype(np.int64) * mask
    rows = rng.integers(0, batch, size=n_masked)
    cols = np.array([rng.integers(1, lengths[r]) for r in rows], dtype=np.int64)
    targets = rng.integers(5, config.vocab_size, size=n_masked)
    is_next = rng.integers(0, 2, size=batch)
    return Batch(tokens, segments, mask, rows, cols, targets, is_next)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus(seed=3, n_sentences=50, vocab_hint=40)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus, 64)


@pytest.fixture()
def tiny_batch(tiny_corpus, tiny_vocab):
    return collate(list(make_examples(tiny_corpus, tiny_vocab, seed=0, max_positions=16, n_examples=8)))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
