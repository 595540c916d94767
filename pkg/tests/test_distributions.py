import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kl_gamma_closed, kl_gamma_quadrature, low_rank_moments_loop
from vdecomp.distributions import (
    GammaPosterior,
    GaussianFactorPosterior,
    Hyperparams,
    gamma_mean,
    kl_gamma,
    kl_gamma_to_prior,
    low_rank_moments,
    sample_factor,
)
from vdecomp.errors import DegenerateVarianceError, InvalidPosteriorError

T = lambda *x: torch.tensor(x, dtype=torch.float64)  # noqa: E731


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert (h.alpha0_gamma, h.alpha0_omega, h.alpha0_lambda) == (2.0, 2.0, 2.0)
        assert (h.beta0_gamma, h.beta0_omega, h.beta0_lambda) == (1e-6, 1e-6, 1e-8)
        assert (h.r0, h.tau, h.sigma0) == (8, 1.0, 1.0)

    @pytest.mark.parametrize("field,value", [("alpha0_gamma", 0.0), ("beta0_lambda", -1.0), ("r0", 0), ("tau", -0.1), ("sigma0", 0.0), ("r0", 2.5)])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError, match=field):
            Hyperparams(**{field: value})

    def test_tau_zero_allowed(self):
        assert Hyperparams(tau=0.0).tau == 0.0


class TestGaussianPosterior:
    def test_shape_mismatch(self):
        with pytest.raises(InvalidPosteriorError):
            GaussianFactorPosterior(torch.zeros(2, 3), torch.ones(3, 2))

    def test_negative_std(self):
        with pytest.raises(InvalidPosteriorError):
            GaussianFactorPosterior(torch.zeros(2), T(1.0, -1.0))

    def test_nonfinite(self):
        with pytest.raises(InvalidPosteriorError):
            GaussianFactorPosterior(T(float("nan"), 0.0), T(1.0, 1.0))

    def test_from_log_std_positive(self):
        p = GaussianFactorPosterior.from_log_std(torch.zeros(3), T(-50.0, 0.0, 3.0))
        assert (p.std > 0).all()


class TestGammaMean:
    def test_ratio(self):
        assert torch.equal(gamma_mean(GammaPosterior(T(9.0, 9.0), T(3.0, 1.0))), T(3.0, 9.0))

    def test_identity(self):
        assert torch.equal(gamma_mean(GammaPosterior(T(5.0), T(5.0))), T(1.0))

    def test_large_mean_matches_sampling(self):
        # 12 / 2e-6 = 6e6; the sample mean of the represented density agrees
        post = GammaPosterior(T(12.0), T(2e-6))
        assert gamma_mean(post).item() == pytest.approx(6e6, rel=1e-12)
        draws = np.random.default_rng(0).gamma(post.shape.item(), 1 / post.rate.item(), size=10**6)
        assert draws.mean() == pytest.approx(6e6, rel=5e-3)

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidPosteriorError):
            GammaPosterior(T(1.0, 0.0), T(1.0, 1.0))
        with pytest.raises(InvalidPosteriorError):
            GammaPosterior(T(1.0), T(-1.0))

    def test_nonfinite_mean(self):
        post = GammaPosterior(T(1e308 * 10), T(1.0)) if False else None  # inf alpha is caught below
        with pytest.raises(InvalidPosteriorError):
            gamma_mean(GammaPosterior(T(math.inf), T(1.0)))
        assert post is None

    @given(st.floats(0.1, 100), st.floats(1e-3, 100), st.floats(1e-3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, a, b, c):
        m1 = gamma_mean(GammaPosterior(T(a), T(b)))
        m2 = gamma_mean(GammaPosterior(T(a * c), T(b * c)))
        assert m1.item() == pytest.approx(m2.item(), rel=1e-12)

    def test_doubled_parameterization(self):
        post = GammaPosterior.from_shape_rate(T(3.0), T(2.0))
        assert post.alpha.item() == 6.0 and post.beta.item() == 4.0
        assert post.shape.item() == 3.0 and post.rate.item() == 2.0
        assert post.mean().item() == 1.5

    def test_expected_log_matches_sampling(self):
        post = GammaPosterior.from_shape_rate(T(2.5), T(4.0))
        draws = np.random.default_rng(1).gamma(2.5, 1 / 4.0, size=400_000)
        assert post.expected_log().item() == pytest.approx(np.log(draws).mean(), abs=5e-3)


class TestSampleFactor:
    def test_zero_std_is_mean(self):
        mean = torch.randn(4, 3, dtype=torch.float64)
        post = GaussianFactorPosterior(mean, torch.zeros_like(mean))
        assert torch.equal(sample_factor(post, 7), mean)

    def test_deterministic(self):
        post = GaussianFactorPosterior(torch.zeros(5, 2), torch.ones(5, 2))
        assert torch.equal(sample_factor(post, 3), sample_factor(post, 3))
        assert not torch.equal(sample_factor(post, 3), sample_factor(post, 4))

    def test_moments(self):
        post = GaussianFactorPosterior(torch.zeros(10**5, dtype=torch.float64), torch.ones(10**5, dtype=torch.float64))
        x = sample_factor(post, 0)
        assert abs(x.mean().item()) < 0.02
        assert abs(x.std().item() - 1) < 0.02

    def test_reparameterized_gradient(self):
        mean = torch.zeros(3, requires_grad=True)
        log_std = torch.zeros(3, requires_grad=True)
        post = GaussianFactorPosterior.from_log_std(mean, log_std)
        sample_factor(post, 0).sum().backward()
        assert torch.equal(mean.grad, torch.ones(3))
        assert log_std.grad.abs().sum() > 0


class TestLowRankMoments:
    def test_symmetric_unit_weights(self):
        u, v = T(1.0, 2.0, 3.0)[:, None], T(-1.0, 0.5)[:, None]
        pa = GaussianFactorPosterior(u, torch.ones_like(u))
        pb = GaussianFactorPosterior(v, torch.ones_like(v))
        mu, var = low_rank_moments(pa, pb)
        expected = (u @ torch.ones(1, 2, dtype=torch.float64) + torch.ones(3, 1, dtype=torch.float64) @ v.T) / 2
        assert torch.allclose(mu, expected, atol=0, rtol=1e-15)
        assert torch.allclose(var, torch.full((3, 2), 0.5, dtype=torch.float64))

    def test_vanishing_std_limit(self):
        rng = np.random.default_rng(0)
        muA, muB = torch.tensor(rng.normal(size=(3, 2))), torch.tensor(rng.normal(size=(4, 2)))
        pa = GaussianFactorPosterior(muA, torch.full((3, 2), 1e-150, dtype=torch.float64))
        pb = GaussianFactorPosterior(muB, torch.full((4, 2), 0.7, dtype=torch.float64))
        mu, var = low_rank_moments(pa, pb)
        assert torch.isfinite(mu).all() and torch.isfinite(var).all()
        # all weight on the mu_A side: mean over k of mu_A[i, k]
        assert torch.allclose(mu, muA.mean(1, keepdim=True).expand(3, 4), atol=1e-12)

    def test_zero_denominator(self):
        z = torch.zeros(2, 1, dtype=torch.float64)
        with pytest.raises(DegenerateVarianceError):
            low_rank_moments(GaussianFactorPosterior(z, z), GaussianFactorPosterior(z, z))

    def test_matches_exact_rational_evaluation(self):
        rng = np.random.default_rng(5)
        muA, sA = rng.normal(size=(3, 2)), rng.uniform(0.1, 1, size=(3, 2))
        muB, sB = rng.normal(size=(3, 2)), rng.uniform(0.1, 1, size=(3, 2))
        mu, var = low_rank_moments(GaussianFactorPosterior(torch.tensor(muA), torch.tensor(sA)), GaussianFactorPosterior(torch.tensor(muB), torch.tensor(sB)))
        mu_ref, var_ref = low_rank_moments_loop(muA, sA, muB, sB)
        np.testing.assert_allclose(mu.numpy(), mu_ref, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(var.numpy(), var_ref, rtol=1e-13)

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_shapes_and_positive_variance(self, h, w, r, seed):
        g = torch.Generator().manual_seed(seed)
        pa = GaussianFactorPosterior(torch.randn(h, r, generator=g), torch.rand(h, r, generator=g) + 0.01)
        pb = GaussianFactorPosterior(torch.randn(w, r, generator=g), torch.rand(w, r, generator=g) + 0.01)
        mu, var = low_rank_moments(pa, pb)
        assert mu.shape == (h, w) and var.shape == (h, w)
        assert (var > 0).all()


class TestKL:
    def test_identical_is_zero(self):
        post = GammaPosterior.from_shape_rate(T(2.0, 3.5), T(1e-6, 7.0))
        assert kl_gamma_to_prior(GammaPosterior.from_shape_rate(T(2.0), T(1.0)), 2.0, 1.0).item() == 0.0
        assert abs(kl_gamma(post.shape, post.rate, post.shape, post.rate)).max().item() < 1e-12

    def test_quadrature_case(self):
        # KL(G(2,1) || G(2,2)) = 2 - 2 ln 2
        value = kl_gamma_to_prior(GammaPosterior.from_shape_rate(T(2.0), T(1.0)), 2.0, 2.0).item()
        assert value == pytest.approx(0.6137056388801094, abs=1e-12)
        assert value == pytest.approx(kl_gamma_quadrature(2.0, 1.0, 2.0, 2.0), abs=1e-6)

    def test_positive_case(self):
        assert kl_gamma_to_prior(GammaPosterior.from_shape_rate(T(3.0), T(1.0)), 2.0, 1.0).item() > 0

    @given(st.floats(0.2, 30), st.floats(0.05, 20), st.floats(0.2, 30), st.floats(0.05, 20))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_and_matches_reference(self, a, b, a0, b0):
        value = kl_gamma(T(a), T(b), a0, b0).item()
        assert value >= -1e-12
        assert value == pytest.approx(float(kl_gamma_closed(a, b, a0, b0)), rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("a,b,a0,b0", [(0.7, 0.3, 2.0, 1e-2), (5.0, 50.0, 2.0, 1.0), (12.0, 3.0, 1.5, 0.5)])
    def test_quadrature_oracle(self, a, b, a0, b0):
        assert kl_gamma(T(a), T(b), a0, b0).item() == pytest.approx(kl_gamma_quadrature(a, b, a0, b0), rel=1e-6, abs=1e-9)

    def test_special_function_table(self):
        # lgamma / digamma at tabulated points
        x = T(0.5, 1.0, 2.0, 5.0)
        np.testing.assert_allclose(torch.lgamma(x).numpy(), [math.log(math.sqrt(math.pi)), 0.0, 0.0, math.log(24.0)], atol=1e-14)
        euler = 0.5772156649015329
        np.testing.assert_allclose(torch.digamma(x).numpy(), [-euler - 2 * math.log(2), -euler, 1 - euler, 1 + 1 / 2 + 1 / 3 + 1 / 4 - euler], atol=1e-13)
