import io

import numpy as np
import pytest

from atnaudit import corpus
from atnaudit.corpus import SplitDataset, TestInstance
from atnaudit.model import ModelConfig, ModelParams, expected_shapes
from atnaudit.synthetic import synthetic_ratings


def build_split(text, seed=0):
    ratings = corpus.parse_ratings(io.StringIO(text))
    interactions = corpus.build_interactions(ratings)
    split = corpus.leave_one_out(interactions)
    return corpus.sample_test_negatives(interactions, split, seed)


def hand_split(train_histories, num_items=150, seed=0):
    """Split with given train histories; test positive and negatives drawn from the rest."""
    rng = np.random.default_rng(seed)
    tests = []
    for u, hist in enumerate(train_histories):
        rest = np.setdiff1d(np.arange(num_items), hist)
        picked = rng.choice(rest, 100, replace=False)
        tests.append(TestInstance(u, int(picked[0]), 10_000 + u, tuple(int(x) for x in picked[1:])))
    n = len(train_histories)
    return SplitDataset(n, num_items, [np.array(h, dtype=np.int64) for h in train_histories],
                        [np.arange(len(h), dtype=np.int64) for h in train_histories], tests,
                        np.arange(1, n + 1), np.arange(1, num_items + 1))


def random_params(config, num_items, rng, scale=0.5):
    """Parameters with every entry ~ N(0, scale^2), biases included."""
    tensors = {name: rng.normal(0.0, scale, size=shape)
               for name, shape in expected_shapes(config, num_items).items()}
    return ModelParams.from_tensors(config, num_items, tensors)


@pytest.fixture(scope="session")
def small_split():
    return build_split(synthetic_ratings(n_users=120, n_items=300, mean_history=30, seed=11), seed=5)


@pytest.fixture
def tiny_config():
    return ModelConfig(embedding_dim=4, mlp_widths=(8, 4), beta=0.8)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(results, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"[{status}] criterion {criterion}: {detail}")
