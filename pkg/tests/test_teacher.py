"""Teacher distributions: exact densities, scores, sampling, perturbation."""

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import energy_distance

from fdistill import rng as rngmod
from fdistill import teacher as tc
from fdistill.errors import DomainError

STANDARD_1D = tc.IsotropicGaussianMixture(
    weights=np.array([1.0]), means=np.array([[0.0]]), variances=np.array([1.0])
)

TWO_COMP_1D = tc.IsotropicGaussianMixture(
    weights=np.array([0.5, 0.5]),
    means=np.array([[-1.0], [1.0]]),
    variances=np.array([1.0, 1.0]),
)

MIX_2D = tc.IsotropicGaussianMixture(
    weights=np.array([0.3, 0.45, 0.25]),
    means=np.array([[-2.0, 0.5], [1.0, 1.0], [0.0, -2.0]]),
    variances=np.array([0.6, 1.2, 0.4]),
)


class TestLogDensity:
    def test_standard_normal_at_origin(self):
        assert tc.log_density(STANDARD_1D, np.array([0.0])) == pytest.approx(
            -0.5 * np.log(2 * np.pi)
        )

    def test_two_component_hand_value(self):
        # log[(N(-1;0,1)+N(1;0,1))/2] = log N(0;0,1) - 1/2 by symmetry
        got = tc.log_density(TWO_COMP_1D, np.array([0.0]))
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5)

    def test_nan_input_rejected(self):
        with pytest.raises(DomainError):
            tc.log_density(STANDARD_1D, np.array([np.nan]))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DomainError):
            tc.log_density(MIX_2D, np.array([1.0]))

    def test_density_integrates_to_one_1d(self):
        for gm in (STANDARD_1D, TWO_COMP_1D):
            total, _ = integrate.quad(
                lambda x: np.exp(tc.log_density(gm, np.array([x]))), -12, 12,
                limit=200,
            )
            assert total == pytest.approx(1.0, abs=1e-3)

    def test_per_sample_sigma_matches_perturb(self):
        x = np.array([[0.3, -0.5], [1.0, 2.0]])
        sig = np.array([0.5, 2.0])
        batched = tc.log_density(MIX_2D, x, sig)
        for i, s in enumerate(sig):
            single = tc.log_density(tc.perturb(MIX_2D, s), x[i])
            assert batched[i] == pytest.approx(single, rel=1e-12)


class TestScore:
    def test_single_gaussian_linear_pull(self):
        gm = tc.IsotropicGaussianMixture(
            weights=np.array([1.0]),
            means=np.array([[0.0, 0.0]]),
            variances=np.array([1.0]),
        )
        np.testing.assert_allclose(
            tc.score(gm, np.array([2.0, 0.0])), np.array([-2.0, 0.0])
        )

    def test_zero_at_isolated_mode(self):
        gm = tc.IsotropicGaussianMixture(
            weights=np.array([0.99, 0.01]),
            means=np.array([[0.0, 0.0], [40.0, 0.0]]),
            variances=np.array([0.5, 0.5]),
        )
        assert np.linalg.norm(tc.score(gm, np.array([0.0, 0.0]))) <= 1e-6

    def test_matches_finite_difference_of_log_density(self):
        gen = rngmod.stream(7, 0x100)
        idx = gen.integers(0, MIX_2D.n_components, size=100)
        probes = MIX_2D.means[idx] + 5.0 * np.sqrt(
            MIX_2D.variances[idx]
        )[:, None] * gen.uniform(-1, 1, size=(100, 2))
        analytic = tc.score(MIX_2D, probes)
        step = 1e-5
        for axis in range(2):
            shift = np.zeros(2)
            shift[axis] = step
            fd = (
                tc.log_density(MIX_2D, probes + shift)
                - tc.log_density(MIX_2D, probes - shift)
            ) / (2 * step)
            np.testing.assert_allclose(analytic[:, axis], fd, atol=1e-5)


class TestPerturb:
    def test_zero_sigma_is_identity(self):
        assert tc.perturb(MIX_2D, 0.0) is MIX_2D

    def test_variance_additivity(self):
        out = tc.perturb(STANDARD_1D, 2.0)
        assert out.variances[0] == pytest.approx(5.0)

    def test_composition_in_quadrature_exact_fields(self):
        # bitwise on dyadic inputs, where float addition is associative
        gm = tc.IsotropicGaussianMixture(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0], [1.0]]),
            variances=np.array([0.5, 0.25]),
        )
        twice = tc.perturb(tc.perturb(gm, 3.0), 4.0)
        once = tc.perturb(gm, np.sqrt(3.0**2 + 4.0**2))
        np.testing.assert_array_equal(twice.variances, once.variances)
        np.testing.assert_array_equal(twice.means, once.means)

    def test_composition_in_quadrature_generic(self):
        a, b = 0.7, 1.9
        twice = tc.perturb(tc.perturb(MIX_2D, a), b)
        once = tc.perturb(MIX_2D, np.sqrt(a**2 + b**2))
        np.testing.assert_allclose(twice.variances, once.variances, rtol=4e-16)
        np.testing.assert_array_equal(twice.means, once.means)

    def test_sampling_perturbed_equals_sample_plus_noise(self):
        """Two-sample energy-distance test on axis projections at n = 1e5."""
        n, sigma = 100000, 1.3
        direct = tc.sample(tc.perturb(MIX_2D, sigma), n, seed=11)
        base = tc.sample(MIX_2D, n, seed=12)
        noised = base + sigma * rngmod.stream(13, 0x7).standard_normal((n, 2))
        gen = rngmod.stream(14, 0x8)
        for _ in range(4):
            direction = gen.standard_normal(2)
            direction /= np.linalg.norm(direction)
            observed = energy_distance(direct @ direction, noised @ direction)
            # permutation reference: distance between shuffled halves
            pooled = np.concatenate([direct @ direction, noised @ direction])
            null = []
            for _ in range(9):
                gen.shuffle(pooled)
                null.append(energy_distance(pooled[:n], pooled[n:]))
            assert observed <= 2.0 * max(null)


class TestSample:
    def test_deterministic_given_seed(self):
        a = tc.sample(MIX_2D, 3, seed=5)
        b = tc.sample(MIX_2D, 3, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_sample_mean_clt_bound(self):
        gm = tc.IsotropicGaussianMixture(
            weights=np.array([1.0]), means=np.array([[2.5]]), variances=np.array([0.7])
        )
        n = 1000000
        xs = tc.sample(gm, n, seed=3)
        assert abs(float(xs.mean()) - 2.5) <= 4.0 * np.sqrt(0.7 / n)

    def test_degenerate_weights_pick_single_component(self):
        gm = tc.IsotropicGaussianMixture(
            weights=np.array([1.0, 0.0]),
            means=np.array([[0.0], [100.0]]),
            variances=np.array([1.0, 1.0]),
        )
        xs = tc.sample(gm, 1000, seed=4)
        assert np.all(np.abs(xs) < 50.0)

    def test_sample_count_validated(self):
        with pytest.raises(DomainError):
            tc.sample(MIX_2D, 0, seed=1)

    def test_density_ratio_expectation_is_one(self):
        """E_q[p/q] = 1: the identity behind stage-1 ratio normalization."""
        p = TWO_COMP_1D
        q = tc.IsotropicGaussianMixture(
            weights=np.array([1.0]), means=np.array([[0.3]]), variances=np.array([2.0])
        )
        n = 100000
        xs = tc.sample(q, n, seed=21)
        log_r = tc.log_density(p, xs) - tc.log_density(q, xs)
        r = np.exp(log_r)
        se = r.std(ddof=1) / np.sqrt(n)
        assert abs(r.mean() - 1.0) <= 3.0 * se


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(DomainError):
            tc.IsotropicGaussianMixture(
                weights=np.array([0.5, 0.4]),
                means=np.array([[0.0], [1.0]]),
                variances=np.array([1.0, 1.0]),
            )

    def test_variances_positive(self):
        with pytest.raises(DomainError):
            tc.IsotropicGaussianMixture(
                weights=np.array([1.0]), means=np.array([[0.0]]),
                variances=np.array([0.0]),
            )

    def test_nonfinite_means_rejected(self):
        with pytest.raises(DomainError):
            tc.IsotropicGaussianMixture(
                weights=np.array([1.0]), means=np.array([[np.inf]]),
                variances=np.array([1.0]),
            )


class TestAffinePushforward:
    def test_identity_map(self):
        gen = tc.AffineGenerator(matrix=np.eye(2), bias=np.zeros(2))
        law = tc.affine_pushforward(gen, 0.0)
        assert isinstance(law, tc.IsotropicGaussianMixture)
        assert law.variances[0] == pytest.approx(1.0)
        np.testing.assert_array_equal(law.means[0], np.zeros(2))

    def test_variance_additivity_with_noise(self):
        gen = tc.AffineGenerator(matrix=np.eye(2), bias=np.array([1.0, 0.0]))
        law = tc.affine_pushforward(gen, 1.0)
        assert law.variances[0] == pytest.approx(2.0)

    def test_score_zero_at_bias(self):
        gen = tc.AffineGenerator(matrix=0.8 * np.eye(2), bias=np.array([0.4, -0.2]))
        law = tc.affine_pushforward(gen, 0.5)
        np.testing.assert_allclose(tc.score(law, gen.bias), np.zeros(2), atol=1e-14)

    def test_non_isotropic_goes_to_full_gaussian(self):
        gen = tc.AffineGenerator(
            matrix=np.array([[1.0, 0.5], [0.0, 1.0]]), bias=np.zeros(2)
        )
        law = tc.affine_pushforward(gen, 0.3)
        assert isinstance(law, tc.FullGaussian)
        # density should match an MC histogram check via the known covariance
        cov = gen.matrix @ gen.matrix.T + 0.09 * np.eye(2)
        x = np.array([0.4, -0.7])
        expected = -0.5 * (
            2 * np.log(2 * np.pi)
            + np.log(np.linalg.det(cov))
            + x @ np.linalg.solve(cov, x)
        )
        assert law.log_density(x) == pytest.approx(expected, rel=1e-12)

    def test_pushforward_matches_sampled_moments(self):
        gen = tc.AffineGenerator(matrix=1.5 * np.eye(2), bias=np.array([2.0, -1.0]))
        law = tc.affine_pushforward(gen, 0.7)
        stream = rngmod.stream(9, 0x33)
        z = stream.standard_normal((200000, 2))
        eps = stream.standard_normal((200000, 2))
        xs = gen.forward(z) + 0.7 * eps
        np.testing.assert_allclose(xs.mean(axis=0), law.means[0], atol=0.02)
        np.testing.assert_allclose(xs.var(axis=0), law.variances[0], rtol=0.02)


class TestParticleDensity:
    def test_matches_exact_law_for_affine(self):
        gen = tc.AffineGenerator(matrix=np.eye(2), bias=np.array([0.5, 0.5]))
        law = tc.affine_pushforward(gen, 1.0)
        stream = rngmod.stream(17, 0x44)
        centers = gen.forward(stream.standard_normal((20000, 2)))
        x = stream.standard_normal((64, 2))
        approx = tc.particle_log_density(centers, x, 1.0)
        exact = tc.log_density(law, x)
        np.testing.assert_allclose(approx, exact, atol=0.05)

    def test_requires_positive_sigma(self):
        with pytest.raises(DomainError):
            tc.particle_log_density(np.zeros((10, 2)), np.zeros((2, 2)), 0.0)


class TestSchedule:
    def test_levels_log_uniform_and_increasing(self):
        sched = tc.NoiseSchedule()
        levels = sched.levels
        assert len(levels) == 64
        assert levels[0] == pytest.approx(0.002)
        assert levels[-1] == pytest.approx(80.0)
        ratios = levels[1:] / levels[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)

    def test_weights_positive_finite(self):
        sched = tc.NoiseSchedule()
        w = sched.time_weight(sched.levels)
        assert np.all(w > 0) and np.all(np.isfinite(w))

    def test_invalid_bounds_rejected(self):
        with pytest.raises(DomainError):
            tc.NoiseSchedule(sigma_min=1.0, sigma_max=0.5)

    def test_bin_ids_cover_range(self):
        sched = tc.NoiseSchedule(n_levels=64)
        ids = sched.bin_ids(np.arange(64), 8)
        assert ids.min() == 0 and ids.max() == 7
        assert np.all(np.diff(ids) >= 0)


class TestPresets:
    def test_ring8_geometry(self):
        gm = tc.ring8()
        assert gm.n_components == 8
        np.testing.assert_allclose(np.linalg.norm(gm.means, axis=1), 4.0)
        np.testing.assert_allclose(gm.variances, 0.09)

    def test_grid25_geometry(self):
        gm = tc.grid25()
        assert gm.n_components == 25
        assert gm.dim == 2

    def test_make_teacher_from_dict(self):
        gm = tc.make_teacher(
            {"weights": [1.0], "means": [[0.0, 1.0]], "variances": [2.0]}
        )
        assert gm.dim == 2

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            tc.make_teacher("ring9")
