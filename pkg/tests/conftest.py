import numpy as np
import pytest

from bnexpand.data import LabeledDataset


def blobs(n_per_class=40, k=2, dim=4, sep=4.0, seed=0, spread=1.0):
    """Gaussian blobs with means on the axes, squashed into [0, 1]."""
    rng = np.random.default_rng(seed)
    means = np.zeros((k, dim))
    for c in range(k):
        means[c, c % dim] = sep * (1 if c < dim else -1)
    x = np.concatenate([rng.normal(means[c], spread, size=(n_per_class, dim)) for c in range(k)])
    y = np.repeat(np.arange(k), n_per_class)
    x = 1.0 / (1.0 + np.exp(-x / 4.0))
    return LabeledDataset(x, y, k, provenance=f"blobs:{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
