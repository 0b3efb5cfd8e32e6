import math

import pytest
import torch

from dwpseg.variational import (
    GaussianPosterior,
    GaussianPrior,
    entropy,
    gaussian_kl,
    log_q,
    sample_weights,
)

D27 = (1, 1, 3, 3, 3)


def post(mu, log_sigma, shape=D27):
    p = GaussianPosterior.from_tensors(
        torch.full(shape, float(mu), dtype=torch.float64), torch.full(shape, float(log_sigma), dtype=torch.float64)
    )
    return p.requires_grad_(False)


def test_zero_noise_returns_mean():
    mu = torch.randn(4, 2, 3, 3, 3)
    p = GaussianPosterior.from_tensors(mu, torch.full_like(mu, -1.0))
    assert torch.equal(sample_weights(p, torch.zeros_like(mu)), mu)


def test_tiny_sigma_draw():
    mu = torch.full((5,), 0.3, dtype=torch.float64)
    w = sample_weights((mu, torch.full_like(mu, -20.0)), torch.ones_like(mu))
    assert torch.allclose(w - mu, torch.full_like(mu, math.exp(-20.0)), rtol=0, atol=1e-12)
    assert abs(math.exp(-20.0) - 2.06e-9) < 1e-11


def test_unit_sigma_draw():
    w = sample_weights(post(0.0, 0.0), torch.full(D27, 1.5, dtype=torch.float64))
    assert torch.all(w == 1.5)


def test_sample_shape_mismatch():
    with pytest.raises(ValueError):
        sample_weights(post(0, 0), torch.zeros(27))


def test_log_q_at_mode_d27():
    p = post(0.0, 0.0)
    expected = -27 * 0.5 * math.log(2 * math.pi)
    assert abs(float(log_q(p, p.mu.detach()).detach()) - expected) < 1e-6
    assert abs(float(log_q(p, p.mu.detach()).detach()) - (-24.811340)) < 1e-6


def test_log_q_single_entry():
    p = post(0.0, 0.0, shape=(1,))
    assert abs(float(log_q(p, torch.zeros(1, dtype=torch.float64))) - (-0.9189385)) < 1e-6


def test_log_q_maximal_at_mean():
    g = torch.Generator().manual_seed(1)
    mu = torch.randn(D27, generator=g, dtype=torch.float64)
    p = GaussianPosterior.from_tensors(mu, torch.randn(D27, generator=g, dtype=torch.float64) * 0.3).requires_grad_(False)
    top = float(log_q(p, mu))
    for _ in range(20):
        w = mu + 0.1 * torch.randn(D27, generator=g, dtype=torch.float64)
        assert float(log_q(p, w)) < top


def test_log_q_shape_mismatch():
    with pytest.raises(ValueError):
        log_q(post(0, 0), torch.zeros(3))


def test_entropy_values():
    oracle_1 = 0.5 * (1 + math.log(2 * math.pi))
    assert abs(float(entropy(post(0, 0, shape=(1,)))) - oracle_1) < 1e-6
    assert abs(float(entropy(post(0, 0, shape=(1,)))) - 1.4189385) < 1e-6
    assert abs(float(entropy(post(0, 0))) - 27 * oracle_1) < 1e-6
    assert abs(float(entropy(post(0, 0))) - 38.311340) < 1e-6


def test_entropy_scale_property():
    base = float(entropy(post(0.0, -0.7)))
    doubled = float(entropy(post(0.0, -0.7 + math.log(2))))
    assert abs((doubled - base) - 27 * math.log(2)) < 1e-9


def test_kl_identical_is_zero():
    assert abs(float(gaussian_kl(post(0, 0), GaussianPrior(0.0, 1.0)))) < 1e-12


def test_kl_shifted_mean():
    assert abs(float(gaussian_kl(post(1.0, 0.0, shape=(1,)), GaussianPrior(0.0, 1.0))) - 0.5) < 1e-9


def test_kl_wider_prior():
    # KL(N(0,1) || N(0,2)) = log(sqrt 2) + 1/4 - 1/2
    oracle = 0.5 * math.log(2.0) + 0.25 - 0.5
    val = float(gaussian_kl(post(0.0, 0.0, shape=(1,)), GaussianPrior(0.0, math.sqrt(2.0))))
    assert abs(val - oracle) < 1e-9
    assert abs(val - 0.0965736) < 1e-6


def test_kl_against_monte_carlo():
    g = torch.Generator().manual_seed(3)
    mu = torch.randn(6, dtype=torch.float64, generator=g)
    ls = 0.3 * torch.randn(6, dtype=torch.float64, generator=g)
    prior = GaussianPrior(0.2, 1.7)
    eps = torch.randn(200000, 6, dtype=torch.float64, generator=g)
    w = mu + ls.exp() * eps
    lq = (-ls - 0.5 * math.log(2 * math.pi) - 0.5 * eps**2).sum(1)
    lp = (-math.log(1.7) - 0.5 * math.log(2 * math.pi) - 0.5 * ((w - 0.2) / 1.7) ** 2).sum(1)
    mc = (lq - lp).mean()
    se = (lq - lp).std() / math.sqrt(w.shape[0])
    assert abs(float(gaussian_kl((mu, ls), prior)) - float(mc)) < 4 * float(se)


@pytest.mark.parametrize("sigma0", [0.0, -1.0])
def test_prior_rejects_bad_sigma(sigma0):
    with pytest.raises(ValueError):
        GaussianPrior(0.0, sigma0)


def test_log_sigma_clamped():
    p = post(0.0, -50.0, shape=(2,))
    assert torch.all(p.sigma == math.exp(-20.0))
    assert torch.all(torch.isfinite(p.sigma))


def test_posterior_shapes_agree():
    p = GaussianPosterior((3, 2, 3, 3, 3))
    assert p.mu.shape == p.log_sigma.shape == p.shape
    with pytest.raises(ValueError):
        GaussianPosterior.from_tensors(torch.zeros(2), torch.zeros(3))
