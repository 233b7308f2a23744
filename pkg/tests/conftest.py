import numpy as np
import pytest

from qblatent.mixture import MixtureParams


@pytest.fixture
def bimodal():
    return MixtureParams([0.5, 0.5], [-2.0, 2.0], 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mixture(rng, K=3, d=1):
    w = rng.dirichlet(np.ones(K))
    atoms = rng.normal(0.0, 1.5, (K, d))
    if d == 1:
        cov = rng.uniform(0.3, 2.0)
    else:
        B = rng.normal(size=(d, d))
        cov = B @ B.T + d * np.eye(d)
    return MixtureParams(w, atoms, cov)
