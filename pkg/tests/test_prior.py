import numpy as np
import pytest

from conftest import finite_difference, relative_error
from ebsal import tensor as T
from ebsal.prior import EBMPrior, partition_estimate
from ebsal.tensor import DimensionError, Tensor


def make_prior(d=4, hidden=8, sigma_z=1.0, seed=5, **kw):
    return EBMPrior(d, hidden=hidden, sigma_z=sigma_z, rng=np.random.default_rng(seed), **kw)


def zero_prior(d=4, hidden=8, sigma_z=1.0):
    p = make_prior(d, hidden, sigma_z)
    for t in p.parameters().values():
        t.data[:] = 0.0
    return p


def plain_mlp(prior, z):
    """Independent plain-numpy forward of the energy-correction MLP."""
    from scipy.stats import norm

    def gelu(v):
        return v * norm.cdf(v)

    h = gelu(z @ prior.w1.data.T + prior.b1.data)
    h = gelu(h @ prior.w2.data.T + prior.b2.data)
    return (h @ prior.w3.data.T + prior.b3.data)[:, 0]


class TestCorrectionMLP:
    def test_zero_weights_give_zero(self, rng):
        p = zero_prior()
        z = rng.normal(size=(6, 4))
        np.testing.assert_array_equal(p.u_alpha(Tensor(z)).data, np.zeros(6))

    def test_output_bias_gives_constant(self, rng):
        p = zero_prior()
        p.b3.data[:] = 2.5
        z = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(p.u_alpha(Tensor(z)).data, np.full(3, 2.5))

    def test_matches_independent_forward(self, rng):
        p = make_prior()
        z = rng.normal(size=(10, 4))
        np.testing.assert_allclose(p.u_alpha(Tensor(z)).data, plain_mlp(p, z), rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            make_prior(d=4).u_alpha(Tensor(np.zeros(3)))


class TestEnergy:
    def test_zero_case(self):
        p = zero_prior(sigma_z=1.0)
        assert p.energy(Tensor(np.zeros(4))).item() == 0.0

    def test_quadratic_term(self):
        p = zero_prior(sigma_z=1.0)
        z = np.array([1.0, 1.0, 0.0, 0.0])  # ||z||^2 = 2
        assert p.energy(Tensor(z)).item() == pytest.approx(1.0)

    def test_energy_minus_correction_is_quadratic(self, rng):
        p = make_prior(sigma_z=0.7)
        z = rng.normal(size=(8, 4))
        gap = p.energy(Tensor(z)).data - p.u_alpha(Tensor(z)).data
        np.testing.assert_allclose(gap, (z**2).sum(axis=1) / (2 * 0.7**2), rtol=1e-12)

    def test_gaussian_term_dominates_far_away(self, rng):
        p = make_prior(d=4, hidden=16, sigma_z=1.0, seed=11)
        for t in (p.w1, p.w2, p.w3):
            t.data[:] = np.clip(t.data, -0.1, 0.1)
        far = np.zeros(4)
        far[0] = 10.0
        assert p.energy(Tensor(far)).item() > p.energy(Tensor(np.zeros(4))).item() + 40.0


class TestEnergyGradient:
    def test_pure_gaussian_gradient_is_z(self, rng):
        p = zero_prior(sigma_z=1.0)
        z = rng.normal(size=(5, 4))
        np.testing.assert_allclose(p.grad_energy_z(z), z, rtol=1e-12)

    def test_zero_at_origin(self):
        p = zero_prior()
        np.testing.assert_array_equal(p.grad_energy_z(np.zeros(4)), np.zeros(4))

    def test_vs_finite_differences(self, rng):
        p = make_prior()
        z0 = rng.normal(size=4)
        grad = p.grad_energy_z(z0)
        fd = finite_difference(lambda z: p.energy(Tensor(z)).item(), z0)
        assert relative_error(grad, fd) < 1e-5

    def test_invariant_sweep_100_draws(self):
        for i in range(100):
            p = make_prior(d=3, hidden=6, seed=100 + i)
            z0 = np.random.default_rng(500 + i).normal(size=3)
            fd = finite_difference(lambda z: p.energy(Tensor(z)).item(), z0)
            assert relative_error(p.grad_energy_z(z0), fd) < 1e-4


class TestParameterGradient:
    def test_output_bias_gradient_is_one(self, rng):
        p = make_prior()
        for z in rng.normal(size=(3, 4)):
            np.testing.assert_allclose(p.grad_u_params(z)["prior.b3"], [1.0])

    def test_zero_hidden_weights_match_finite_differences(self, rng):
        p = make_prior()
        p.w1.data[:] = 0.0
        z0 = rng.normal(size=4)
        grads = p.grad_u_params(z0)
        w1_0 = p.w1.data.copy()

        def f(w):
            p.w1.data = w
            try:
                return float(p.u_alpha(Tensor(z0)).item())
            finally:
                p.w1.data = w1_0

        fd = finite_difference(f, w1_0)
        assert np.isfinite(grads["prior.w1"]).all()
        assert relative_error(grads["prior.w1"], fd) < 1e-5

    def test_purity(self, rng):
        p = make_prior()
        z = rng.normal(size=4)
        first = p.grad_u_params(z)
        second = p.grad_u_params(z)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_does_not_disturb_existing_grads(self, rng):
        p = make_prior()
        p.w1.grad = np.full_like(p.w1.data, 7.0)
        p.grad_u_params(rng.normal(size=4))
        np.testing.assert_array_equal(p.w1.grad, np.full_like(p.w1.data, 7.0))


class TestPartitionOracle:
    def test_gaussian_1d(self):
        p = zero_prior(d=1, hidden=4)
        assert p.partition_oracle(8.0, 512) == pytest.approx(np.sqrt(2 * np.pi), abs=1e-3)

    def test_gaussian_2d(self):
        p = zero_prior(d=2, hidden=4)
        assert p.partition_oracle(7.0, 200) == pytest.approx(2 * np.pi, abs=1e-2)

    def test_stub_energy_total_exponent_z_squared(self):
        est = partition_estimate(lambda z: (z**2).sum(axis=1), 1, 8.0, 512)
        assert est == pytest.approx(np.sqrt(np.pi), abs=1e-3)

    def test_high_dimension_rejected(self):
        with pytest.raises(DimensionError):
            make_prior(d=3).partition_oracle(6.0, 64)

    def test_density_self_consistency(self, rng):
        p = make_prior(d=2, hidden=6, seed=21)
        z_norm = p.partition_oracle(8.0, 300)

        def normalized_density(z):
            return np.exp(-p.energy(Tensor(z)).data) / z_norm

        total = partition_estimate(
            lambda z: -np.log(normalized_density(z)), 2, 8.0, 300
        )
        assert total == pytest.approx(1.0, abs=1e-3)


class TestGaussianMode:
    def test_correction_absent(self, rng):
        p = EBMPrior(4, hidden=8, gaussian_mode=True)
        z = rng.normal(size=(5, 4))
        np.testing.assert_allclose(p.energy(Tensor(z)).data, (z**2).sum(axis=1) / 2)

    def test_weights_are_frozen_zeros(self):
        p = EBMPrior(4, hidden=8, gaussian_mode=True)
        for t in p.parameters().values():
            assert not t.requires_grad
            np.testing.assert_array_equal(t.data, np.zeros_like(t.data))

    def test_param_gradients_unavailable(self, rng):
        p = EBMPrior(4, hidden=8, gaussian_mode=True)
        with pytest.raises(ValueError):
            p.grad_u_params_mean(rng.normal(size=(3, 4)))
