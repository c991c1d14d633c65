import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_streamlines(rng, n, m=40, scale=30.0, wiggle=3.0):
    """Smooth-ish random streamlines: a random segment plus low-amplitude noise."""
    start = rng.uniform(-scale, scale, size=(n, 1, 3))
    direction = rng.normal(size=(n, 1, 3))
    t = np.linspace(0, 1, m)[None, :, None]
    return start + 40.0 * t * direction + rng.normal(0, wiggle, size=(n, m, 3))
