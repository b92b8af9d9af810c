import numpy as np
import pytest
from hypothesis import settings

from fedl2p import nn

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def random_model(rng, in_dim=3, hidden=(5, 4), n_classes=3, input_bn=False, client_stats=True):
    """Small network with non-trivial BN parameters and (optionally) client stats."""
    model = nn.init_model(in_dim, list(hidden), n_classes, rng, input_bn=input_bn)
    layers = list(model.layers)
    for i in model.bn_indices:
        c = layers[i].channels
        layers[i] = nn.BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.3, c),
                                 rng.normal(0, 0.5, c), rng.uniform(0.5, 2.0, c))
    model = nn.Model(tuple(layers))
    if client_stats:
        model = nn.with_client_stats(model, [(rng.normal(0, 0.5, model.layers[i].channels),
                                              rng.uniform(0.5, 2.0, model.layers[i].channels))
                                             for i in model.bn_indices])
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
