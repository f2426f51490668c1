import numpy as np
import pytest

from adkd.data import SyntheticSpec, Vocab, encode, synthetic_keyword_task
from adkd.model import ModelConfig
from adkd.trainer import OptimConfig, train_teacher


class KeywordTask:
    def __init__(self, vocab, train, dev, model, report):
        self.vocab, self.train, self.dev = vocab, train, dev
        self.model, self.report = model, report


@pytest.fixture(scope="session")
def keyword_task():
    """A small model trained on the synthetic keyword task (shared, read-only)."""
    train_ex, dev_ex = synthetic_keyword_task(SyntheticSpec(num_train=600, num_dev=150, max_words=8, seed=4))
    vocab = Vocab.build(train_ex)
    train, dev = encode(vocab, train_ex, 12), encode(vocab, dev_ex, 12)
    cfg = ModelConfig(num_layers=2, hidden_dim=32, num_heads=4, vocab_size=len(vocab), max_len=12,
                      num_labels=2, seed=0)
    model, report = train_teacher(train, dev, cfg, OptimConfig(lr=3e-3, batch_size=32, epochs=3))
    return KeywordTask(vocab, train, dev, model, report)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
