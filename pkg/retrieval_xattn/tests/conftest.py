import numpy as np
import pytest

from retrieval_xattn.knn_index import Datastore
from retrieval_xattn.model import ModelConfig, ModelWeights
from retrieval_xattn.numerics import Rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_weights(config: ModelConfig, seed: int = 0, bias_std: float = 0.1) -> ModelWeights:
    """float64 weights with nonzero attention biases."""
    rng = Rng(seed).split("test-weights")
    weights = ModelWeights.initialize(config, rng.split("init")).astype(np.float64)
    gen = rng.split("bias").generator
    for name, value in weights.params.items():
        if name.endswith((".bq", ".bk", ".bv")):
            weights.params[name] = gen.standard_normal(value.shape) * bias_std
    return weights


def random_datastore(n: int, d: int, seed: int = 0) -> Datastore:
    vectors = Rng(seed).split("test-datastore").generator.standard_normal((n, d))
    return Datastore(vectors, np.arange(n)).freeze()


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=16, n_heads=2, d_ff=32, window=8, vocab_size=32, init_std=0.3)


@pytest.fixture
def tiny_weights(tiny_config):
    return random_weights(tiny_config)


@pytest.fixture
def default_weights():
    return ModelWeights.initialize(ModelConfig())
