import numpy as np
import pytest

from helpers import LinearStub
from ebsal.langevin import (
    LangevinConfig,
    SamplerDivergence,
    langevin_step,
    sample_posterior,
    sample_prior,
)
from ebsal.prior import EBMPrior


def gaussian_prior(d):
    return EBMPrior(d, hidden=4, gaussian_mode=True)


class TestStep:
    def test_noise_free_quadratic(self):
        # energy z^2/2 has gradient z; one step from 1.0 with step 0.1
        out = langevin_step(np.array([1.0]), np.array([1.0]), 0.1, np.array([0.0]))
        assert out[0] == pytest.approx(0.9)

    def test_hand_value_with_unit_noise(self):
        out = langevin_step(np.array([1.0]), np.array([1.0]), 0.1, np.array([1.0]))
        assert out[0] == pytest.approx(1.3472135954999579, abs=1e-15)

    def test_non_finite_gradient_rejected(self):
        with pytest.raises(SamplerDivergence):
            langevin_step(np.array([1.0]), np.array([np.inf]), 0.1, np.array([0.0]))


class TestConfig:
    def test_zero_steps_allowed(self):
        LangevinConfig(steps=0, step_size=0.0)

    def test_positive_step_size_required(self):
        with pytest.raises(ValueError):
            LangevinConfig(steps=3, step_size=0.0)


class TestPriorSampler:
    def test_zero_steps_returns_reference_draws(self):
        prior = gaussian_prior(3)
        cfg = LangevinConfig(steps=0, step_size=0.0, seed=1, stream="s")
        z = sample_prior(prior, cfg, 5)
        # with K=0 the chains are exactly the N(0, sigma_z^2) initial values
        z0 = sample_prior(prior, LangevinConfig(steps=0, step_size=0.0, seed=1, stream="s"), 5)
        np.testing.assert_array_equal(z, z0)
        assert z.shape == (5, 3)

    def test_same_seed_identical(self):
        prior = gaussian_prior(2)
        cfg = LangevinConfig(steps=20, step_size=0.05, seed=9, stream="x")
        a = sample_prior(prior, cfg, 8)
        b = sample_prior(prior, cfg, 8)
        np.testing.assert_array_equal(a, b)

    def test_chains_independent_of_batching(self):
        prior = gaussian_prior(2)
        cfg = LangevinConfig(steps=15, step_size=0.05, seed=3, stream="split")
        full = sample_prior(prior, cfg, 6)
        parts = [sample_prior(prior, cfg, 2, start_index=i) for i in (0, 2, 4)]
        np.testing.assert_array_equal(full, np.vstack(parts))

    def test_stationary_moments_small(self):
        # reduced version of the chain-law check; the full-size one is in acceptance
        prior = gaussian_prior(1)
        delta = 0.05
        cfg = LangevinConfig(steps=400, step_size=delta, seed=13, stream="law")
        z = sample_prior(prior, cfg, 4000)
        assert abs(z.mean()) < 0.08
        assert z.var() == pytest.approx(1.0 / (1.0 - delta / 2.0), abs=0.09)

    def test_divergence_guard_fires(self):
        prior = gaussian_prior(2)
        cfg = LangevinConfig(steps=400, step_size=2.5, seed=2, stream="boom")
        with pytest.raises(SamplerDivergence):
            sample_prior(prior, cfg, 4)


class TestPosteriorSampler:
    def test_conjugate_linear_gaussian_mean(self):
        # A = I2, target s = (2, 0), unit prior and noise:
        # posterior is N((1, 0), I/2); the chain mean must land on it
        prior = gaussian_prior(2)
        gen = LinearStub(np.eye(2))
        chains = 500
        targets = np.tile(np.array([2.0, 0.0]), (chains, 1)).reshape(chains, 1, 1, 2)
        cfg = LangevinConfig(steps=2000, step_size=0.02, seed=4, stream="conj")
        z = sample_posterior(prior, gen, None, targets, 1.0, cfg)
        mean = z.mean(axis=0)
        assert abs(mean[0] - 1.0) < 0.1
        assert abs(mean[1] - 0.0) < 0.1

    def test_stationary_point_with_zero_noise(self):
        prior = gaussian_prior(2)
        gen = LinearStub(np.eye(2))
        z0 = np.zeros(2)
        targets = np.zeros((1, 1, 1, 2))  # equals the stub output at z0
        cfg = LangevinConfig(
            steps=10,
            step_size=0.1,
            deterministic_noise=np.zeros((10, 2)),
            initial_value=z0,
        )
        z = sample_posterior(prior, gen, None, targets, 1.0, cfg)
        np.testing.assert_allclose(z, np.zeros((1, 2)), atol=1e-14)

    def test_autodiff_drift_equals_explicit_bracket(self, rng):
        # recover the drift from a single noise-free step and compare with the
        # hand-written gradient of the joint density for the linear model
        A = rng.normal(size=(3, 2))
        sigma_eps = 0.7
        prior = gaussian_prior(2)
        gen = LinearStub(A)
        z0 = rng.normal(size=2)
        s = rng.normal(size=3)
        delta = 0.01
        cfg = LangevinConfig(
            steps=1,
            step_size=delta,
            deterministic_noise=np.zeros((1, 2)),
            initial_value=z0,
        )
        out = sample_posterior(prior, gen, None, s.reshape(1, 1, 1, 3), sigma_eps, cfg)
        drift = (z0 - out[0]) / delta
        explicit = prior.grad_energy_z(z0) - (A.T @ (s - A @ z0)) / sigma_eps**2
        assert np.abs(drift - explicit).max() / np.abs(explicit).max() < 1e-10

    def test_same_seed_identical(self, rng):
        prior = gaussian_prior(2)
        gen = LinearStub(rng.normal(size=(2, 2)))
        targets = rng.normal(size=(3, 1, 1, 2))
        cfg = LangevinConfig(steps=5, step_size=0.1, seed=5, stream="det")
        a = sample_posterior(prior, gen, None, targets, 1.0, cfg)
        b = sample_posterior(prior, gen, None, targets, 1.0, cfg)
        np.testing.assert_array_equal(a, b)

    def test_divergence_error_carries_step(self):
        prior = gaussian_prior(2)
        gen = LinearStub(5.0 * np.eye(2))
        targets = np.full((2, 1, 1, 2), 50.0)
        cfg = LangevinConfig(steps=200, step_size=1.0, seed=6, stream="div")
        with pytest.raises(SamplerDivergence) as info:
            sample_posterior(prior, gen, None, targets, 0.05, cfg)
        assert info.value.step >= 0

    def test_parameters_untouched_by_sampling(self, rng):
        prior = EBMPrior(2, hidden=4, rng=np.random.default_rng(8))
        gen = LinearStub(rng.normal(size=(2, 2)))
        before_a = gen.A.data.copy()
        before_w = prior.w1.data.copy()
        targets = rng.normal(size=(4, 1, 1, 2))
        cfg = LangevinConfig(steps=5, step_size=0.05, seed=7, stream="ro")
        sample_posterior(prior, gen, None, targets, 1.0, cfg)
        np.testing.assert_array_equal(gen.A.data, before_a)
        np.testing.assert_array_equal(prior.w1.data, before_w)
        assert gen.A.grad is None
        assert gen.A.requires_grad  # frozen context restored
