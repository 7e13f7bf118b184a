import math

import numpy as np
import pytest

from conftest import random_dataset, random_hyperparams
from sparsebq.dataset import Dataset
from sparsebq.kernel import KernelHyperparams
from sparsebq.sgpr import fit as sgpr_fit
from sparsebq.variational import (
    FitOptions,
    MixturePosterior,
    build_up,
    elbo,
    entropy_mc,
    fit,
    initial_mixture,
    log_pdf,
    pdf,
    sample,
    symmetrized_kl_mc,
)


def gaussian_surrogate(rng, mean, sd, n=250, spread=2.5):
    """Dense noiseless surrogate of an exactly normalized Gaussian target."""
    dim = mean.size

    def logp(x):
        z = (x - mean) / sd
        return (
            -0.5 * np.sum(z**2, axis=-1)
            - np.sum(np.log(sd))
            - 0.5 * dim * math.log(2 * math.pi)
        )

    x = rng.normal(mean, spread * sd, size=(n, dim))
    ds = Dataset(x, logp(x), np.full(n, 1e-5))
    hp = KernelHyperparams(
        3.0, 1.5 * sd, float(ds.y_max), mean.copy(), 3.0 * sd
    )
    return sgpr_fit(ds, np.arange(n), hp)


def flat_surrogate(dim):
    """Zero posterior mean everywhere, tiny variance: ELBO reduces to entropy."""
    x = np.full((1, dim), 1e4)
    ds = Dataset(x, np.array([0.0]), np.array([1e10]))
    hp = KernelHyperparams(
        1e-3, np.ones(dim), 0.0, np.zeros(dim), np.full(dim, 1e8)
    )
    return sgpr_fit(ds, np.array([0]), hp)


class TestMixture:
    def test_single_component_peak_density(self):
        lam = np.array([0.5, 2.0])
        q = MixturePosterior(np.array([1.0]), np.zeros((1, 2)), np.array([1.3]), lam)
        expected = (2 * math.pi) ** -1 / np.prod(1.3 * lam)
        assert pdf(q, np.zeros(2)) == pytest.approx(expected)

    def test_density_integrates_to_one(self, rng):
        q = MixturePosterior(
            np.array([0.3, 0.7]),
            rng.normal(0, 1, (2, 2)),
            np.array([0.8, 1.4]),
            np.array([1.0, 0.6]),
        )
        # importance estimate under a wide Gaussian proposal
        n = 1_000_000
        proposal_sd = 6.0
        xs = rng.normal(0, proposal_sd, size=(n, 2))
        log_prop = -0.5 * np.sum((xs / proposal_sd) ** 2, axis=1) - 2 * math.log(
            proposal_sd
        ) - math.log(2 * math.pi)
        w = np.exp(log_pdf(q, xs) - log_prop)
        est = w.mean()
        se = w.std() / math.sqrt(n)
        assert abs(est - 1.0) < 4 * se

    def test_pdf_nonnegative(self, rng):
        q = MixturePosterior(
            np.array([0.5, 0.5]), rng.normal(0, 1, (2, 3)), np.ones(2), np.ones(3)
        )
        assert np.all(pdf(q, rng.normal(0, 3, size=(100, 3))) >= 0.0)

    def test_invalid_mixtures_rejected(self):
        with pytest.raises(ValueError):
            MixturePosterior(np.array([0.5, 0.4]), np.zeros((2, 1)), np.ones(2), np.ones(1))
        with pytest.raises(ValueError):
            MixturePosterior(np.array([1.0]), np.zeros((1, 1)), np.array([-1.0]), np.ones(1))

    def test_dict_roundtrip(self, rng):
        q = MixturePosterior(
            np.array([0.25, 0.75]),
            rng.normal(0, 1, (2, 2)),
            np.array([1.0, 2.0]),
            np.array([0.5, 1.5]),
        )
        back = MixturePosterior.from_dict(q.to_dict())
        np.testing.assert_allclose(back.mu, q.mu)
        np.testing.assert_allclose(back.weights, q.weights)


class TestSample:
    def test_component_mean_recovered(self, rng):
        q = MixturePosterior(
            np.array([1.0]), np.array([[2.0, -1.0]]), np.array([0.7]), np.ones(2)
        )
        draws = sample(q, 1_000_000, seed=0)
        se = 0.7 / math.sqrt(1_000_000)
        assert np.all(np.abs(draws.mean(axis=0) - [2.0, -1.0]) < 4 * se)

    def test_component_frequencies_match_weights(self, rng):
        w = np.array([0.2, 0.8])
        q = MixturePosterior(
            w, np.array([[-10.0], [10.0]]), np.array([0.1, 0.1]), np.ones(1)
        )
        draws = sample(q, 200_000, seed=1)
        frac = float(np.mean(draws[:, 0] > 0))
        se = math.sqrt(0.2 * 0.8 / 200_000)
        assert abs(frac - 0.8) < 4 * se

    def test_seed_determinism(self):
        q = MixturePosterior(
            np.array([0.5, 0.5]), np.zeros((2, 2)), np.ones(2), np.ones(2)
        )
        np.testing.assert_array_equal(sample(q, 100, seed=42), sample(q, 100, seed=42))


class TestElbo:
    def test_flat_surrogate_elbo_is_entropy(self):
        q = MixturePosterior(
            np.array([1.0]), np.zeros((1, 2)), np.array([5.0]), np.array([2.0, 3.0])
        )
        state = flat_surrogate(2)
        est = elbo(q, state, n_mc=20_000, seed=0)
        analytic_entropy = 0.5 * 2 * math.log(2 * math.pi * math.e) + math.log(
            5.0 * 2.0
        ) + math.log(5.0 * 3.0)
        assert est.mean == pytest.approx(analytic_entropy, abs=0.02)

    def test_gaussian_target_elbo_near_log_normalizer(self, rng):
        mean = np.array([0.4, -0.2])
        sd = np.array([0.9, 1.3])
        state = gaussian_surrogate(rng, mean, sd)
        q = MixturePosterior(
            np.array([1.0]), mean[None, :], np.array([1.0]), sd.copy()
        )
        est = elbo(q, state, n_mc=2**14, seed=0)
        assert abs(est.mean - 0.0) < 0.05

    def test_mc_noise_shrinks_with_samples(self):
        state = flat_surrogate(2)
        q = MixturePosterior(
            np.array([0.5, 0.5]),
            np.array([[0.0, 0.0], [2.0, 1.0]]),
            np.array([1.0, 0.7]),
            np.ones(2),
        )
        spreads = []
        for n_mc in (10, 100, 10_000):
            vals = [
                elbo(q, state, n_mc=n_mc, seed=s).mean for s in range(20)
            ]
            spreads.append(np.std(vals))
        assert spreads[0] > spreads[1] > spreads[2]
        # roughly 1/sqrt(n) scaling, within a factor of two
        ratio = spreads[0] / spreads[2]
        assert ratio > math.sqrt(1000.0) / 2.0

    def test_entropy_gradient_matches_fd(self, rng):
        q = MixturePosterior(
            np.array([0.4, 0.6]),
            rng.normal(0, 1, (2, 2)),
            np.array([0.9, 1.2]),
            np.array([1.1, 0.8]),
        )
        h, g_mu, g_sigma, g_lam, g_w = entropy_mc(
            q, 64, np.random.default_rng(5), return_grads=True
        )
        eps = 1e-6

        def h_at(qq):
            return entropy_mc(qq, 64, np.random.default_rng(5))

        for kk in range(2):
            for d in range(2):
                mp, mm = q.mu.copy(), q.mu.copy()
                mp[kk, d] += eps
                mm[kk, d] -= eps
                fd = (
                    h_at(MixturePosterior(q.weights, mp, q.sigma, q.lam))
                    - h_at(MixturePosterior(q.weights, mm, q.sigma, q.lam))
                ) / (2 * eps)
                assert g_mu[kk, d] == pytest.approx(fd, rel=1e-4, abs=1e-6)
        for kk in range(2):
            sp, sm = q.sigma.copy(), q.sigma.copy()
            sp[kk] += eps
            sm[kk] -= eps
            fd = (
                h_at(MixturePosterior(q.weights, q.mu, sp, q.lam))
                - h_at(MixturePosterior(q.weights, q.mu, sm, q.lam))
            ) / (2 * eps)
            assert g_sigma[kk] == pytest.approx(fd, rel=1e-4, abs=1e-6)


class TestFit:
    def test_recovers_gaussian_target(self, rng):
        mean = np.array([0.5, -0.3])
        sd = np.array([0.8, 1.4])
        state = gaussian_surrogate(rng, mean, sd)
        q0 = initial_mixture(state, k=1)
        q = fit(q0, state, FitOptions(n_iters=400, seed=1))
        np.testing.assert_allclose(q.mu[0], mean, atol=0.05)
        np.testing.assert_allclose(q.sigma[0] * q.lam, sd, rtol=0.1)

    def test_already_optimal_start_stays_put(self, rng):
        mean = np.zeros(2)
        sd = np.ones(2)
        state = gaussian_surrogate(rng, mean, sd)
        q0 = MixturePosterior(np.array([1.0]), mean[None, :], np.array([1.0]), sd.copy())
        q = fit(q0, state, FitOptions(n_iters=150, seed=2))
        assert np.max(np.abs(q.mu - q0.mu)) < 0.01
        assert np.max(np.abs(q.sigma * q.lam - sd)) < 0.02

    def test_result_is_valid_mixture(self, rng):
        ds = random_dataset(rng, 60, 2)
        hp = random_hyperparams(rng, 2)
        state = sgpr_fit(ds, np.arange(0, 60, 2), hp)
        q = fit(initial_mixture(state, k=3), state, FitOptions(n_iters=80, seed=0))
        assert abs(q.weights.sum() - 1.0) < 1e-12
        assert np.all(q.sigma > 0) and np.all(q.lam > 0)

    def test_elbo_bounded_by_normalizer_on_conjugate_case(self, rng):
        state = gaussian_surrogate(rng, np.zeros(2), np.ones(2))
        q = fit(initial_mixture(state, k=2), state, FitOptions(n_iters=300, seed=3))
        est = elbo(q, state, n_mc=2**14, seed=11)
        assert est.mean <= 0.1  # true log normalizer is 0


class TestBuildUp:
    def test_gaussian_caps_small(self, rng):
        state = gaussian_surrogate(rng, np.zeros(2), np.ones(2))
        q = build_up(state, FitOptions(n_iters=120, seed=4), refit_iters=80)
        assert q.k <= 5

    def test_never_exceeds_component_cap(self, rng):
        ds = random_dataset(rng, 80, 2)
        hp = random_hyperparams(rng, 2)
        state = sgpr_fit(ds, np.arange(0, 80, 2), hp)
        q = build_up(
            state,
            FitOptions(n_iters=30, seed=5),
            kl_tol=1e-12,
            max_components=8,
            refit_iters=20,
        )
        assert q.k <= 8

    def test_final_elbo_not_below_two_component_start(self, rng):
        state = gaussian_surrogate(rng, np.zeros(2), np.ones(2))
        opts = FitOptions(n_iters=120, seed=6)
        q2 = fit(initial_mixture(state, k=2), state, opts)
        q = build_up(state, opts, refit_iters=80)
        est2 = elbo(q2, state, n_mc=2**13, seed=7)
        est = elbo(q, state, n_mc=2**13, seed=7)
        assert est.mean >= est2.mean - 0.1

    def test_bimodal_surrogate_gets_both_modes(self, rng):
        # two well-separated Gaussians, 2:1 mass
        def logp(x):
            a = -0.5 * np.sum((x - 2.0) ** 2, axis=-1) + math.log(2 / 3)
            b = -0.5 * np.sum((x + 2.0) ** 2, axis=-1) + math.log(1 / 3)
            return np.logaddexp(a, b) - math.log(2 * math.pi)

        x = np.vstack(
            [rng.normal(2.0, 1.2, size=(150, 2)), rng.normal(-2.0, 1.2, size=(150, 2))]
        )
        ds = Dataset(x, logp(x), np.full(300, 1e-5))
        hp = KernelHyperparams(
            2.0, np.ones(2), float(ds.y_max), np.zeros(2), np.full(2, 4.0)
        )
        state = sgpr_fit(ds, np.arange(300), hp)
        q = build_up(state, FitOptions(n_iters=200, seed=8), refit_iters=120)
        mass_right = float(np.mean(sample(q, 20_000, 0)[:, 0] > 0))
        assert 0.05 < mass_right < 0.95  # both modes materially represented
        assert mass_right == pytest.approx(2.0 / 3.0, abs=0.15)


class TestSymmetrizedKl:
    def test_zero_for_identical(self, rng):
        q = MixturePosterior(
            np.array([0.5, 0.5]), rng.normal(0, 1, (2, 2)), np.ones(2), np.ones(2)
        )
        assert symmetrized_kl_mc(q, q, n=5_000, seed=0) == pytest.approx(0.0, abs=1e-12)

    def test_orders_by_separation(self):
        base = MixturePosterior(np.array([1.0]), np.zeros((1, 1)), np.ones(1), np.ones(1))
        near = MixturePosterior(np.array([1.0]), np.array([[0.2]]), np.ones(1), np.ones(1))
        far = MixturePosterior(np.array([1.0]), np.array([[2.0]]), np.ones(1), np.ones(1))
        kl_near = symmetrized_kl_mc(base, near, n=20_000, seed=1)
        kl_far = symmetrized_kl_mc(base, far, n=20_000, seed=1)
        assert kl_near < kl_far
        # analytic symmetrized KL for two unit Gaussians: delta^2 / 2
        assert kl_far == pytest.approx(2.0, abs=0.15)
