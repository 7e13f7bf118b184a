import math

import numpy as np
import pytest

from conftest import random_dataset
from sparsebq.dataset import Dataset
from sparsebq.kernel import (
    HyperpriorSpec,
    KernelHyperparams,
    default_hyperparams,
    k_cross,
    kernel,
    kernel_from_sq_diffs,
    log_hyperprior,
    mean_fn,
    pairwise_sq_diffs,
)


def simple_hp(dim=1, sigma_f=1.0, ell=1.0):
    return KernelHyperparams(
        sigma_f=sigma_f,
        ell=np.full(dim, ell),
        m0=0.0,
        mu_m=np.zeros(dim),
        omega=np.ones(dim),
    )


class TestKernel:
    def test_zero_distance(self):
        hp = simple_hp(2, sigma_f=1.7)
        x = np.array([0.3, -0.2])
        assert kernel(x, x, hp) == pytest.approx(1.7**2)

    def test_unit_distance_value(self):
        hp = simple_hp(1)
        assert kernel(np.array([0.0]), np.array([1.0]), hp) == pytest.approx(
            math.exp(-0.5)
        )

    def test_symmetry(self, rng):
        hp = simple_hp(3, sigma_f=0.8, ell=1.4)
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert kernel(a, b, hp) == pytest.approx(kernel(b, a, hp))

    def test_bounded_by_sigma_f_sq(self, rng):
        hp = simple_hp(2, sigma_f=2.0)
        for _ in range(20):
            a, b = rng.normal(size=2), rng.normal(size=2)
            assert kernel(a, b, hp) <= hp.sigma_f**2 + 1e-15

    def test_cross_matches_scalar(self, rng):
        hp = KernelHyperparams(1.3, np.array([0.7, 2.0]), 0.0, np.zeros(2), np.ones(2))
        a = rng.normal(size=(4, 2))
        b = rng.normal(size=(3, 2))
        mat = k_cross(a, b, hp)
        for i in range(4):
            for j in range(3):
                assert mat[i, j] == pytest.approx(kernel(a[i], b[j], hp))

    def test_cached_diffs_match_direct(self, rng):
        hp = KernelHyperparams(0.9, np.array([1.1, 0.6]), 0.0, np.zeros(2), np.ones(2))
        a = rng.normal(size=(5, 2))
        b = rng.normal(size=(6, 2))
        d2 = pairwise_sq_diffs(a, b)
        np.testing.assert_allclose(
            kernel_from_sq_diffs(d2, hp), k_cross(a, b, hp), rtol=1e-13
        )

    def test_gram_positive_definite_with_noise(self, rng):
        hp = simple_hp(2)
        x = rng.normal(size=(30, 2))
        gram = k_cross(x, x, hp)
        gram[np.diag_indices(30)] += 1e-5
        np.linalg.cholesky(gram)  # must not raise


class TestMean:
    def test_vertex_value(self):
        hp = KernelHyperparams(1.0, np.ones(2), 3.5, np.array([1.0, -1.0]), np.ones(2))
        assert mean_fn(np.array([1.0, -1.0]), hp) == pytest.approx(3.5)

    def test_quadratic_dropoff(self):
        hp = simple_hp(1)
        assert mean_fn(np.array([2.0]), hp) == pytest.approx(-2.0)

    def test_reflection_symmetry(self, rng):
        hp = KernelHyperparams(
            1.0, np.ones(3), 0.7, rng.normal(size=3), rng.uniform(1, 2, 3)
        )
        delta = rng.normal(size=3)
        assert mean_fn(hp.mu_m + delta, hp) == pytest.approx(
            mean_fn(hp.mu_m - delta, hp)
        )

    def test_never_exceeds_max(self, rng):
        hp = KernelHyperparams(1.0, np.ones(2), 1.2, np.zeros(2), np.ones(2))
        xs = rng.normal(0, 3, size=(100, 2))
        assert np.all(mean_fn(xs, hp) <= hp.m0 + 1e-12)


class TestHyperprior:
    def test_mode_is_maximal_under_perturbation(self, rng):
        ds = random_dataset(rng, 80, 2)
        spec = HyperpriorSpec.from_dataset(ds)
        hp_mode = default_hyperparams(ds)
        base = spec.log_density(hp_mode)
        for factor in (0.5, 0.75, 1.5, 2.0):
            perturbed = KernelHyperparams(
                hp_mode.sigma_f * factor,
                hp_mode.ell * factor,
                hp_mode.m0,
                hp_mode.mu_m,
                hp_mode.omega * factor,
            )
            assert spec.log_density(perturbed) < base

    def test_vanishing_length_scale_diverges(self, rng):
        ds = random_dataset(rng, 50, 2)
        spec = HyperpriorSpec.from_dataset(ds)
        hp = default_hyperparams(ds)
        values = []
        for ell_scale in (1e-2, 1e-6, 1e-12):
            small = KernelHyperparams(
                hp.sigma_f, hp.ell * ell_scale, hp.m0, hp.mu_m, hp.omega
            )
            values.append(spec.log_density(small))
        assert values[0] > values[1] > values[2]
        assert values[2] < -100.0

    def test_doubling_sigma_f_decreases_prior(self, rng):
        ds = random_dataset(rng, 60, 3)
        hp = default_hyperparams(ds)
        doubled = KernelHyperparams(
            2.0 * hp.sigma_f, hp.ell, hp.m0, hp.mu_m, hp.omega
        )
        assert log_hyperprior(doubled, ds) < log_hyperprior(hp, ds)

    def test_finite_for_valid_params(self, rng):
        ds = random_dataset(rng, 40, 2)
        for _ in range(10):
            hp = KernelHyperparams(
                float(rng.uniform(0.1, 10)),
                rng.uniform(0.1, 10, 2),
                float(rng.normal(0, 10)),
                rng.normal(0, 5, 2),
                rng.uniform(0.1, 10, 2),
            )
            assert np.isfinite(log_hyperprior(hp, ds))


class TestVectorPacking:
    def test_roundtrip(self, rng):
        hp = KernelHyperparams(
            1.7, rng.uniform(0.5, 2, 3), -4.0, rng.normal(size=3), rng.uniform(1, 2, 3)
        )
        back = KernelHyperparams.from_vector(hp.to_vector(), 3)
        assert back.sigma_f == pytest.approx(hp.sigma_f)
        np.testing.assert_allclose(back.ell, hp.ell)
        assert back.m0 == pytest.approx(hp.m0)
        np.testing.assert_allclose(back.mu_m, hp.mu_m)
        np.testing.assert_allclose(back.omega, hp.omega)

    def test_validation(self):
        with pytest.raises(ValueError):
            KernelHyperparams(-1.0, np.ones(2), 0.0, np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            KernelHyperparams(1.0, np.zeros(2), 0.0, np.zeros(2), np.ones(2))
