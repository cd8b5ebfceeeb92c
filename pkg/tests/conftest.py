import numpy as np
import pytest

from fairgu.graph import build_graph


def random_graph(rng, n, edge_prob=0.3, feature_dim=3):
    """Random undirected graph with random binary attributes and splits."""
    draw = rng.random((n, n)) < edge_prob
    iu, ju = np.triu_indices(n, k=1)
    hit = draw[iu, ju]
    edges = np.column_stack([iu[hit], ju[hit]])
    return build_graph(
        n, edges,
        rng.normal(size=(n, feature_dim)),
        rng.integers(0, 2, size=n),
        rng.integers(0, 2, size=n),
        rng.integers(0, 3, size=n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
