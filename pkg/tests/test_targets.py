import math

import numpy as np
import pytest

from sparsebq.targets import (
    gaussian_target,
    noisy_wrap,
    optimizer_init,
    rosenbrock_gaussian_6d,
    rosenbrock_gaussian_target,
    slice_sampler_init,
    two_moons_2d,
    two_moons_target,
)


class TestRosenbrockGaussian:
    def banana(self, a, b):
        return -((a**2 - b) ** 2) - (b - 1.0) ** 2 / 100.0

    def test_banana_term_values(self):
        assert self.banana(1.0, 1.0) == 0.0
        assert self.banana(0.0, 0.0) == pytest.approx(-0.01)

    def test_full_value_composition(self):
        x = np.array([0.3, -0.4, 1.1, 0.9, 0.2, -0.7])
        expected = (
            self.banana(x[0], x[1])
            + self.banana(x[2], x[3])
            - 0.5 * (x[4] ** 2 + x[5] ** 2)
            - math.log(2 * math.pi)
            - 0.5 * np.sum(x**2) / 9.0
            - 3.0 * math.log(18 * math.pi)
        )
        assert rosenbrock_gaussian_6d(x) == pytest.approx(expected)

    def test_block_swap_symmetry(self, rng):
        x = rng.normal(0, 2, size=6)
        swapped = np.concatenate([x[2:4], x[0:2], x[4:6]])
        assert rosenbrock_gaussian_6d(x) == pytest.approx(
            rosenbrock_gaussian_6d(swapped)
        )

    def test_reference_sampler_moments(self):
        t = rosenbrock_gaussian_target()
        samples = t.reference_sampler(100_000, seed=0)
        assert samples.shape == (100_000, 6)
        # the last two coordinates are exactly N(0, 0.9)
        np.testing.assert_allclose(samples[:, 4:].std(axis=0), math.sqrt(0.9), atol=0.01)
        np.testing.assert_allclose(samples[:, 4:].mean(axis=0), 0.0, atol=0.02)
        # block symmetry: first two blocks have matching moments
        np.testing.assert_allclose(
            samples[:, 0:2].mean(axis=0), samples[:, 2:4].mean(axis=0), atol=0.03
        )

    def test_true_lml_matches_importance_estimate(self):
        t = rosenbrock_gaussian_target()
        rng = np.random.default_rng(0)
        n = 400_000
        sd = np.array([1.5, 2.5, 1.5, 2.5, 1.0, 1.0])
        mean = np.array([0.0, 1.5, 0.0, 1.5, 0.0, 0.0])
        xs = mean + sd * rng.standard_normal((n, 6))
        log_prop = np.sum(
            -0.5 * ((xs - mean) / sd) ** 2 - np.log(sd) - 0.5 * math.log(2 * math.pi),
            axis=1,
        )
        log_f = np.array([rosenbrock_gaussian_6d(x) for x in xs])
        w = np.exp(log_f - log_prop)
        est = math.log(w.mean())
        se = w.std() / (w.mean() * math.sqrt(n))
        assert abs(est - t.true_lml) < max(4 * se, 0.02)


class TestTwoMoons:
    def test_zero_radial_term_on_circle(self):
        r = 1.0 / math.sqrt(2.0)
        x = np.array([r * math.cos(0.3), r * math.sin(0.3)])
        val = two_moons_2d(x)
        c = 8.0 * x[0] / r
        angular = np.logaddexp(c - math.log(3.0), -c + math.log(2.0 / 3.0))
        assert val == pytest.approx(angular)

    def test_reflection_symmetry_in_x2(self, rng):
        for _ in range(10):
            x = rng.normal(0, 0.7, size=2)
            if np.linalg.norm(x) < 1e-9:
                continue
            assert two_moons_2d(x) == pytest.approx(
                two_moons_2d(np.array([x[0], -x[1]]))
            )

    def test_origin_is_minus_infinity(self):
        assert two_moons_2d(np.zeros(2)) == -math.inf

    def test_mode_mass_ratio_two_to_one(self):
        # grid integration of the left (x1 < 0) vs right (x1 > 0) mass
        xs = np.linspace(-0.85, 0.85, 851)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        r = np.hypot(pts[:, 0], pts[:, 1])
        r = np.maximum(r, 1e-12)
        radial = -0.5 * ((r - 1 / math.sqrt(2)) / 0.01) ** 2
        c = 8.0 * pts[:, 0] / r
        logp = radial + np.logaddexp(c - math.log(3), -c + math.log(2.0 / 3.0))
        p = np.exp(logp - logp.max())
        mass_left = p[pts[:, 0] < 0].sum()
        mass_right = p[pts[:, 0] > 0].sum()
        assert mass_left / mass_right == pytest.approx(2.0, abs=0.02)

    def test_reference_sampler_consistent_with_masses(self):
        t = two_moons_target()
        samples = t.reference_sampler(200_000, seed=1)
        frac_left = float(np.mean(samples[:, 0] < 0))
        assert frac_left == pytest.approx(2.0 / 3.0, abs=0.01)


class TestNoisyWrap:
    def test_reported_sd_matches_configuration(self):
        t = noisy_wrap(gaussian_target(2), sigma_obs=2.0, seed=0)
        y, sd = t.evaluate(np.zeros(2))
        assert sd == 2.0
        assert not t.exact

    def test_empirical_sd(self):
        t = noisy_wrap(gaussian_target(1), sigma_obs=0.7, seed=3)
        x = np.array([0.5])
        vals = np.array([t.evaluate(x)[0] for _ in range(10_000)])
        assert vals.std() == pytest.approx(0.7, rel=0.05)

    def test_mean_matches_exact_value(self):
        base = gaussian_target(1)
        t = noisy_wrap(base, sigma_obs=0.5, seed=4)
        x = np.array([-0.3])
        truth, _ = base.evaluate(x)
        vals = np.array([t.evaluate(x)[0] for _ in range(5_000)])
        assert vals.mean() == pytest.approx(truth, abs=4 * 0.5 / math.sqrt(5_000))

    def test_rng_state_roundtrip(self):
        t = noisy_wrap(gaussian_target(1), sigma_obs=1.0, seed=5)
        t.evaluate(np.zeros(1))
        state = t.rng_state()
        a = t.evaluate(np.zeros(1))[0]
        t.set_rng_state(state)
        b = t.evaluate(np.zeros(1))[0]
        assert a == b


class TestSliceSamplerInit:
    def test_budget_respected_and_counted(self):
        t = gaussian_target(2)
        ds = slice_sampler_init(t, n_chains=4, budget=400, seed=0)
        assert ds.n <= 400
        assert ds.n > 300  # nearly all evaluations recorded (no -inf draws)

    def test_recorded_values_are_faithful(self):
        t = gaussian_target(2)
        ds = slice_sampler_init(t, n_chains=2, budget=150, seed=1)
        for i in range(0, ds.n, 17):
            y, _ = t.evaluate(ds.x[i])
            assert ds.y[i] == pytest.approx(y, abs=1e-12)

    def test_long_run_covers_the_mode(self):
        t = gaussian_target(1)
        ds = slice_sampler_init(t, n_chains=2, budget=3000, seed=2)
        # accepted and probe points together straddle the mode
        w = np.exp(ds.y - ds.y.max())
        mean_est = float(np.sum(w * ds.x[:, 0]) / np.sum(w))
        assert abs(mean_est) < 0.5

    def test_budget_precondition(self):
        with pytest.raises(ValueError):
            slice_sampler_init(gaussian_target(1), n_chains=4, budget=30, seed=0)

    def test_deterministic(self):
        t = gaussian_target(2)
        a = slice_sampler_init(t, n_chains=2, budget=200, seed=9)
        b = slice_sampler_init(t, n_chains=2, budget=200, seed=9)
        np.testing.assert_array_equal(a.x, b.x)


class TestOptimizerInit:
    def test_finds_quadratic_maximum(self):
        t = gaussian_target(2)  # log density is a concave quadratic
        ds = optimizer_init(t, n_runs=3, budget=900, seed=0)
        assert ds.y.max() >= t.evaluate(np.zeros(2))[0] - 0.01

    def test_points_cluster_near_mode(self):
        t = gaussian_target(2)
        ds = optimizer_init(t, n_runs=4, budget=1200, seed=1)
        # 99% HPD box of a standard normal is about [-3, 3]^2
        inside = np.mean(np.all(np.abs(ds.x) < 3.0, axis=1))
        assert inside >= 0.5

    def test_runs_use_distinct_streams(self):
        t = gaussian_target(2)
        ds = optimizer_init(t, n_runs=2, budget=200, seed=3)
        # first points of the two runs differ
        assert ds.n > 150

    def test_budget_respected(self):
        t = gaussian_target(2)
        ds = optimizer_init(t, n_runs=2, budget=100, seed=4)
        assert ds.n <= 100

    def test_budget_precondition(self):
        with pytest.raises(ValueError):
            optimizer_init(gaussian_target(1), n_runs=10, budget=100, seed=0)
