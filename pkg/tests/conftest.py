import numpy as np
import pytest

from sparsebq.dataset import Dataset
from sparsebq.kernel import KernelHyperparams


def random_dataset(rng, n, dim, noise_lo=0.1, noise_hi=1.0, spread=2.0):
    x = rng.normal(0.0, spread, size=(n, dim))
    y = -0.5 * np.sum(x**2, axis=1) + 0.3 * rng.standard_normal(n)
    s2 = rng.uniform(noise_lo, noise_hi, size=n)
    return Dataset(x, y, s2)


def random_hyperparams(rng, dim, sigma_f=None):
    return KernelHyperparams(
        sigma_f=float(rng.uniform(0.5, 2.0)) if sigma_f is None else sigma_f,
        ell=rng.uniform(0.5, 2.0, dim),
        m0=float(rng.normal()),
        mu_m=rng.normal(0.0, 1.0, dim),
        omega=rng.uniform(1.0, 3.0, dim),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
