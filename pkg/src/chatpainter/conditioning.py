"""Conditioning augmentation: e -> (mu, log sigma), reparameterized sampling,
and the KL regularizer toward the standard normal."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class ConditioningSample:
    """One reparameterized draw; c_hat = mu + exp(log_sigma) * epsilon holds
    elementwise by construction."""

    mu: torch.Tensor
    log_sigma: torch.Tensor
    epsilon: torch.Tensor
    c_hat: torch.Tensor


class ConditioningAugmentation(nn.Module):
    """Single affine map from the text embedding to (mu, log sigma).

    The network emits log sigma rather than sigma, so positivity needs no
    clamping; the first half of the affine output is mu, the second half
    log sigma.
    """

    def __init__(self, in_dim: int, n_g: int):
        super().__init__()
        self.n_g = n_g
        self.fc = nn.Linear(in_dim, 2 * n_g)
        # Start sigma small. With the default zero-ish bias (sigma ~ 1) the
        # sampled condition is noise-dominated, the discriminator learns to
        # ignore it, and the KL term then locks mu, log sigma at (0, 0) for
        # good. A low initial log sigma keeps c_hat readable long enough for
        # the matching-aware loss to reward conditioning. The objective is
        # unchanged; the KL pull toward sigma = 1 remains.
        nn.init.constant_(self.fc.bias[self.n_g :], -2.5)

    def forward(self, e: torch.Tensor, epsilon: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> ConditioningSample:
        if e.shape[-1] != self.fc.in_features:
            raise ValueError(f"embedding dim {e.shape[-1]} != expected {self.fc.in_features}")
        out = self.fc(e)
        mu, log_sigma = out[..., : self.n_g], out[..., self.n_g :]
        if epsilon is None:
            epsilon = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        elif epsilon.shape != mu.shape:
            raise ValueError(f"epsilon shape {tuple(epsilon.shape)} != mu shape {tuple(mu.shape)}")
        c_hat = mu + torch.exp(log_sigma) * epsilon
        return ConditioningSample(mu=mu, log_sigma=log_sigma, epsilon=epsilon, c_hat=c_hat)


def kl_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(sigma^2)) || N(0, I)) in closed form, summed over the
    last axis: sum_i 0.5*(mu_i^2 + exp(2*log_sigma_i) - 2*log_sigma_i - 1).

    Batched inputs give one scalar per row.
    """
    if not torch.isfinite(mu).all() or not torch.isfinite(log_sigma).all():
        raise ValueError("non-finite input to kl_standard_normal")
    return 0.5 * (mu.pow(2) + torch.exp(2 * log_sigma) - 2 * log_sigma - 1).sum(dim=-1)
