import numpy as np
import pytest

from sinkhorn_transformer.measures import DiscreteMeasure, normalized_weights


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_measure(rng, n, dim=2, low=0.2):
    return DiscreteMeasure(rng.uniform(size=(n, dim)), normalized_weights(rng.uniform(low, 1.0, n)))
