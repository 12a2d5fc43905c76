import numpy as np
import pytest

from mixsdr import matops
from mixsdr.model import MixedModelParams


def random_spd(rng, p, scale=1.0):
    a = rng.normal(size=(p, p))
    return scale * (a @ a.T / p + np.eye(p))


def random_params(rng, p, q, r, scale=0.5):
    m = matops.n_vech(q)
    return MixedModelParams(
        Delta=random_spd(rng, p) if p else np.zeros((0, 0)),
        mu_x=rng.normal(size=p),
        mu_h=rng.uniform(0.2, 0.8, size=q),
        A=rng.normal(size=(p, r)),
        beta=scale * rng.normal(size=(p, q)),
        tau0=scale * rng.normal(size=m),
        tau=scale * rng.normal(size=(m, r)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
