import numpy as np
import pytest

from flockgnn.graphs import SupportMatrix


def random_support(rng, n, density=0.4, weighted=False, self_loops=False):
    dense = (rng.random((n, n)) < density).astype(float)
    if weighted:
        dense *= rng.random((n, n))
    if not self_loops:
        np.fill_diagonal(dense, 0.0)
    return SupportMatrix.from_dense(dense)


def random_connected_adjacency(rng, n, p=0.3):
    """Symmetric binary adjacency of a connected graph (spanning-tree
    backbone plus random extra edges)."""
    dense = np.zeros((n, n))
    order = rng.permutation(n)
    for a, b in zip(order, order[1:]):
        dense[a, b] = dense[b, a] = 1.0
    extra = rng.random((n, n)) < p
    extra = np.triu(extra, 1)
    dense = np.maximum(dense, extra + extra.T)
    np.fill_diagonal(dense, 0.0)
    return SupportMatrix.from_dense(dense)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
