import numpy as np
import pytest

from causal_gat.corpus import CorpusSpec, corpus_vocab, gen_corpus
from causal_gat.model import ModelConfig, init_model
from causal_gat.training import TrainSpec, train


CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def micro_config(**kw) -> ModelConfig:
    base = dict(vocab_size=11, context_length=8, num_layers=1, num_heads=2, embed_dim=8,
                dropout_rate=0.0, seed=3, init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def micro_params():
    return init_model(micro_config(), [f"t{i}" for i in range(11)])


@pytest.fixture(scope="session")
def default_corpus_42():
    spec = CorpusSpec(seed=42)
    corpus = gen_corpus(spec)
    return spec, corpus, corpus_vocab(corpus, spec).padded(ModelConfig().vocab_size)


@pytest.fixture(scope="session")
def trained_42(default_corpus_42):
    """Default toy model trained 500 steps on the default corpus, seed 42."""
    _, corpus, vocab = default_corpus_42
    params = init_model(ModelConfig(seed=42), vocab.tokens)
    return train(params, corpus.train, vocab, TrainSpec(max_steps=500, seed=42))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
