import numpy as np
import pytest

from icner.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from icner.model import ModelConfig, ModelParams
from icner.train import build_vocabulary


@pytest.fixture(scope="session")
def small_corpus():
    spec = SyntheticCorpusSpec(
        num_types=6, instances_per_type=8, vocabulary_size=60,
        nil_fraction=0.2, seed=7,
    )
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocabulary(list(small_corpus), [])


@pytest.fixture(scope="session")
def tiny_config(small_vocab):
    return ModelConfig(
        num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=24,
        vocab_size=len(small_vocab.tokens), max_len=160, dropout=0.0, seed=0,
    )


@pytest.fixture()
def tiny_params(tiny_config):
    return ModelParams.init(tiny_config)


def rng(seed=0):
    return np.random.default_rng(seed)
