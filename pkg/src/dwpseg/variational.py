"""Mean-field Gaussian distributions over convolution kernels.

The posterior over one layer's kernel tensor ``[C_out, C_in, k, k, k]`` is a
fully factorised Gaussian parametrised by ``mu`` and ``log_sigma``. All
functions here take noise explicitly, so they are pure and reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
from torch import Tensor, nn

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 5.0
LOG_SIGMA_INIT = -5.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def clamp_log_sigma(log_sigma: Tensor) -> Tensor:
    return log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)


class GaussianPosterior(nn.Module):
    """Factorised Gaussian q(w) = N(mu, exp(log_sigma)^2) over a kernel tensor.

    Each ``[k, k, k]`` slice ``w[o, i]`` is one independent factor; that slice
    is also the unit the kernel prior scores.
    """

    def __init__(self, shape, log_sigma_init: float = LOG_SIGMA_INIT, dtype=None):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(shape, dtype=dtype))
        self.log_sigma = nn.Parameter(torch.full(shape, float(log_sigma_init), dtype=dtype))

    @classmethod
    def from_tensors(cls, mu: Tensor, log_sigma: Tensor) -> "GaussianPosterior":
        if mu.shape != log_sigma.shape:
            raise ValueError(f"mu shape {tuple(mu.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
        post = cls(mu.shape, dtype=mu.dtype)
        with torch.no_grad():
            post.mu.copy_(mu)
            post.log_sigma.copy_(log_sigma)
        return post

    @property
    def shape(self) -> torch.Size:
        return self.mu.shape

    @property
    def sigma(self) -> Tensor:
        return clamp_log_sigma(self.log_sigma).exp()

    def extra_repr(self) -> str:
        return f"shape={tuple(self.mu.shape)}"


@dataclass(frozen=True)
class GaussianPrior:
    """Explicit N(mu0, sigma0^2) prior, broadcast over a kernel tensor."""

    mu0: Union[float, Tensor] = 0.0
    sigma0: Union[float, Tensor] = 1.0

    def __post_init__(self):
        if not bool(torch.all(torch.as_tensor(self.sigma0) > 0)):
            raise ValueError("prior sigma0 must be positive")

    def log_prob(self, w: Tensor) -> Tensor:
        """Summed log-density of ``w``."""
        mu0 = torch.as_tensor(self.mu0, dtype=w.dtype)
        sigma0 = torch.as_tensor(self.sigma0, dtype=w.dtype)
        z = (w - mu0) / sigma0
        return (-torch.log(sigma0) - _HALF_LOG_2PI - 0.5 * z * z).expand_as(w).sum()


def _params(post) -> tuple[Tensor, Tensor]:
    if isinstance(post, GaussianPosterior):
        return post.mu, post.log_sigma
    mu, log_sigma = post
    if mu.shape != log_sigma.shape:
        raise ValueError(f"mu shape {tuple(mu.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
    return mu, log_sigma


def sample_weights(post, noise: Tensor) -> Tensor:
    """Reparametrised draw ``mu + sigma * noise``.

    ``post`` is a GaussianPosterior or a ``(mu, log_sigma)`` pair; ``noise``
    must be standard normal with the posterior's shape.
    """
    mu, log_sigma = _params(post)
    if noise.shape != mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != posterior shape {tuple(mu.shape)}")
    return mu + clamp_log_sigma(log_sigma).exp() * noise


def log_q_elementwise(mu: Tensor, log_sigma: Tensor, w: Tensor) -> Tensor:
    ls = clamp_log_sigma(log_sigma)
    z = (w - mu) * torch.exp(-ls)
    return -ls - _HALF_LOG_2PI - 0.5 * z * z


def log_q(post, w: Tensor) -> Tensor:
    """Summed Gaussian log-density of ``w`` under the posterior."""
    mu, log_sigma = _params(post)
    if w.shape != mu.shape:
        raise ValueError(f"w shape {tuple(w.shape)} != posterior shape {tuple(mu.shape)}")
    return log_q_elementwise(mu, log_sigma, w).sum()


def entropy(post) -> Tensor:
    """Differential entropy, summed over all entries."""
    _, log_sigma = _params(post)
    return (clamp_log_sigma(log_sigma) + 0.5 + _HALF_LOG_2PI).sum()


def gaussian_kl(post, prior: GaussianPrior) -> Tensor:
    """Closed-form KL(q || p) for a diagonal Gaussian q and an explicit Gaussian prior."""
    mu, log_sigma = _params(post)
    mu0 = torch.as_tensor(prior.mu0, dtype=mu.dtype)
    sigma0 = torch.as_tensor(prior.sigma0, dtype=mu.dtype)
    if not bool(torch.all(sigma0 > 0)):
        raise ValueError("prior sigma0 must be positive")
    ls = clamp_log_sigma(log_sigma)
    var_ratio = torch.exp(2.0 * ls) / sigma0**2
    kl = torch.log(sigma0) - ls + 0.5 * (var_ratio + (mu - mu0) ** 2 / sigma0**2) - 0.5
    return kl.expand_as(mu).sum()
