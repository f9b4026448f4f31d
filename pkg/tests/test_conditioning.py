import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chatpainter.conditioning import ConditioningAugmentation, kl_standard_normal
from _gradcheck import max_relative_grad_error


def kl_by_quadrature(mu, sigma):
    """Numerical KL(N(mu, sigma^2) || N(0,1)) for one scalar dimension."""
    from scipy.integrate import quad

    def integrand(x):
        z = (x - mu) / sigma
        log_p = -0.5 * z * z - math.log(sigma * math.sqrt(2 * math.pi))
        log_q = -0.5 * x * x - math.log(math.sqrt(2 * math.pi))
        return math.exp(log_p) * (log_p - log_q)

    lo, hi = mu - 20 * sigma, mu + 20 * sigma
    value, _ = quad(integrand, lo, hi, limit=400, points=[mu], epsabs=1e-12, epsrel=1e-12)
    return value


class TestForward:
    def setup_method(self):
        torch.manual_seed(0)
        self.ca = ConditioningAugmentation(12, 5)

    def test_shapes_and_identity(self):
        e = torch.randn(4, 12)
        s = self.ca(e)
        assert s.mu.shape == s.log_sigma.shape == s.epsilon.shape == s.c_hat.shape == (4, 5)
        assert torch.equal(s.c_hat, s.mu + torch.exp(s.log_sigma) * s.epsilon)

    def test_zero_noise_returns_mean(self):
        e = torch.randn(3, 12)
        s = self.ca(e, epsilon=torch.zeros(3, 5))
        assert torch.equal(s.c_hat, s.mu)

    def test_zero_parameters_pass_noise_through(self):
        with torch.no_grad():
            self.ca.fc.weight.zero_()
            self.ca.fc.bias.zero_()
        eps = torch.randn(3, 5)
        s = self.ca(torch.randn(3, 12), epsilon=eps)
        assert torch.equal(s.mu, torch.zeros(3, 5))
        assert torch.equal(s.c_hat, eps)

    def test_seeded_generator_is_deterministic(self):
        e = torch.randn(2, 12)
        g1 = torch.Generator().manual_seed(9)
        g2 = torch.Generator().manual_seed(9)
        assert torch.equal(self.ca(e, generator=g1).c_hat, self.ca(e, generator=g2).c_hat)

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            self.ca(torch.randn(2, 11))
        with pytest.raises(ValueError):
            self.ca(torch.randn(2, 12), epsilon=torch.randn(2, 4))

    def test_reparameterized_sample_statistics(self):
        # large-sample mean/std of c_hat must track (mu, sigma)
        torch.manual_seed(1)
        ca = ConditioningAugmentation(6, 4)
        e = torch.randn(1, 6)
        with torch.no_grad():
            ref = ca(e, epsilon=torch.zeros(1, 4))
            sigma = torch.exp(ref.log_sigma)
            gen = torch.Generator().manual_seed(3)
            draws = torch.stack([ca(e, generator=gen).c_hat[0] for _ in range(20000)])
        assert torch.allclose(draws.mean(0), ref.mu[0], atol=0.03 * float(sigma.max()) + 1e-3)
        assert torch.allclose(draws.var(0), sigma[0] ** 2, rtol=0.08)


class TestKl:
    def test_standard_normal_gives_zero(self):
        assert float(kl_standard_normal(torch.zeros(1, 7), torch.zeros(1, 7))) == 0.0

    def test_closed_form_examples(self):
        # mu=1, sigma=1: 0.5 per coordinate
        v = kl_standard_normal(torch.ones(1, 3), torch.zeros(1, 3))
        assert torch.allclose(v, torch.tensor([1.5]))
        # mu=0, log sigma=1: 0.5*e^2 - 1.5
        v = kl_standard_normal(torch.zeros(1, 1), torch.ones(1, 1))
        assert abs(float(v) - (0.5 * math.e**2 - 1.5)) < 1e-6

    def test_matches_numerical_integration(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            mu = float(rng.normal(scale=2.0))
            sigma = float(np.exp(rng.normal(scale=1.0)))
            closed = float(
                kl_standard_normal(
                    torch.tensor([[mu]], dtype=torch.float64),
                    torch.tensor([[math.log(sigma)]], dtype=torch.float64),
                )
            )
            assert abs(closed - kl_by_quadrature(mu, sigma)) < 1e-6

    def test_sums_over_last_axis_per_row(self):
        mu = torch.randn(4, 6, dtype=torch.float64)
        ls = torch.randn(4, 6, dtype=torch.float64)
        v = kl_standard_normal(mu, ls)
        assert v.shape == (4,)
        manual = torch.stack(
            [kl_standard_normal(mu[i : i + 1], ls[i : i + 1])[0] for i in range(4)]
        )
        assert torch.equal(v, manual)

    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
        arrays(np.float64, (3, 4), elements=st.floats(-3, 2)),
    )
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, mu, log_sigma):
        v = kl_standard_normal(torch.from_numpy(mu), torch.from_numpy(log_sigma))
        assert bool((v >= -1e-12).all())

    def test_zero_only_at_standard_normal(self):
        mu = torch.tensor([[1e-2, 0.0]])
        ls = torch.zeros(1, 2)
        assert float(kl_standard_normal(mu, ls)) > 1e-5
        assert float(kl_standard_normal(torch.zeros(1, 2), torch.full((1, 2), 1e-2))) > 1e-5

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            kl_standard_normal(torch.tensor([[float("nan")]]), torch.zeros(1, 1))
        with pytest.raises(ValueError):
            kl_standard_normal(torch.zeros(1, 1), torch.tensor([[float("inf")]]))

    def test_exact_gradients(self):
        mu = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        ls = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
        kl_standard_normal(mu, ls).sum().backward()
        assert torch.allclose(mu.grad, mu.detach(), atol=1e-12)
        assert torch.allclose(ls.grad, torch.exp(2 * ls.detach()) - 1, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        ca = ConditioningAugmentation(6, 4).double()
        e = torch.randn(3, 6, dtype=torch.float64)
        loss_fn = lambda: kl_standard_normal(
            ca(e, epsilon=torch.zeros(3, 4, dtype=torch.float64)).mu,
            ca(e, epsilon=torch.zeros(3, 4, dtype=torch.float64)).log_sigma,
        ).mean()
        err = max_relative_grad_error(loss_fn, list(ca.parameters()), n_coords=4)
        assert err < 1e-6, err

    def test_descent_reaches_standard_normal(self):
        # minimizing the KL alone drives (mu, log sigma) to (0, 0)
        torch.manual_seed(0)
        ca = ConditioningAugmentation(4, 3)
        e = torch.randn(2, 4)
        opt = torch.optim.Adam(ca.parameters(), lr=1e-2)
        for _ in range(2000):
            opt.zero_grad()
            s = ca(e, epsilon=torch.zeros(2, 3))
            kl_standard_normal(s.mu, s.log_sigma).mean().backward()
            opt.step()
        with torch.no_grad():
            s = ca(e, epsilon=torch.zeros(2, 3))
        assert float(s.mu.abs().max()) < 1e-3
        assert float(s.log_sigma.abs().max()) < 1e-3
