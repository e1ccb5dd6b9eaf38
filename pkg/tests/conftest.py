import numpy as np
import pytest

from kga.kg import KnowledgeGraph, triple_to_text
from kga.model import Model, ModelConfig
from kga.vocab import Vocab


@pytest.fixture(scope="session")
def tiny_model():
    return Model.init(ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32,
                                  vocab_size=40, max_seq_len=64, seed=3))


@pytest.fixture(scope="session")
def small_kg():
    rows = [("e0", "r0", "e1"), ("e0", "r1", "e2"), ("e1", "r0", "e3"),
            ("e2", "r2", "e0"), ("e3", "r1", "e4"), ("e4", "r2", "e1")]
    return KnowledgeGraph.from_tuples(rows)


@pytest.fixture(scope="session")
def small_vocab(small_kg):
    words = ["what", "is", "the", "of", "?", "(", ",", ")", "yes", "no"]
    return Vocab.from_texts(words + [triple_to_text(t) for t in small_kg.triples])


def random_tokens(rng, n, vocab_size=40):
    return rng.integers(5, vocab_size, size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def emit(number, ok, detail, seconds, limit):
        ok = bool(ok) and seconds < limit
        line = (f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} "
                f"[{seconds:.1f}s, limit {limit:g}s]")
        print(line)
        lines.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
