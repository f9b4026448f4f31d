"""Independent per-sample re-implementation of the four adversarial losses.

Each function loops over the batch one sample at a time with explicit noise
and combines plain floats, so any broadcasting or reduction mistake in the
batched implementations shows up as a numeric mismatch.
"""
import math

import torch

from chatpainter.conditioning import kl_standard_normal


def _log(x: float) -> float:
    return math.log(max(x, 1e-8))


def _chat(ca, e_row, eps_row):
    return ca(e_row, eps_row).c_hat


@torch.no_grad()
def per_sample_d_loss_stage1(batch, g0, d0, ca, eps_match, eps_mismatch):
    n = batch.images.shape[0]
    terms = []
    for i in range(n):
        c = _chat(ca, batch.bundle.e[i : i + 1], eps_match[i : i + 1])
        c_mm = _chat(ca, batch.bundle_mismatch.e[i : i + 1], eps_mismatch[i : i + 1])
        fake = g0(batch.z[i : i + 1], c)
        x = batch.images[i : i + 1]
        terms.append(
            _log(float(d0(x, c)[0]))
            + 0.5 * _log(1.0 - float(d0(x, c_mm)[0]))
            + 0.5 * _log(1.0 - float(d0(fake, c)[0]))
        )
    return sum(terms) / n


@torch.no_grad()
def per_sample_g_loss_stage1(batch, g0, d0, ca, lam, epsilon):
    n = batch.images.shape[0]
    terms = []
    for i in range(n):
        cs = ca(batch.bundle.e[i : i + 1], epsilon[i : i + 1])
        fake = g0(batch.z[i : i + 1], cs.c_hat)
        kl = float(kl_standard_normal(cs.mu, cs.log_sigma)[0])
        terms.append(_log(1.0 - float(d0(fake, cs.c_hat)[0])) + lam * kl)
    return sum(terms) / n


@torch.no_grad()
def per_sample_d_loss_stage2(batch, frozen, g, d, ca, eps_s0, eps_match, eps_mismatch):
    n = batch.images.shape[0]
    terms = []
    for i in range(n):
        s0 = frozen.sample_s0(batch.bundle.e[i : i + 1], batch.z[i : i + 1], epsilon=eps_s0[i : i + 1])
        c = _chat(ca, batch.bundle.e[i : i + 1], eps_match[i : i + 1])
        c_mm = _chat(ca, batch.bundle_mismatch.e[i : i + 1], eps_mismatch[i : i + 1])
        fake = g(s0, c)
        x = batch.images[i : i + 1]
        terms.append(
            _log(float(d(x, c)[0]))
            + 0.5 * _log(1.0 - float(d(x, c_mm)[0]))
            + 0.5 * _log(1.0 - float(d(fake, c)[0]))
        )
    return sum(terms) / n


@torch.no_grad()
def per_sample_g_loss_stage2(batch, frozen, g, d, ca, lam, eps_s0, epsilon):
    n = batch.images.shape[0]
    terms = []
    for i in range(n):
        s0 = frozen.sample_s0(batch.bundle.e[i : i + 1], batch.z[i : i + 1], epsilon=eps_s0[i : i + 1])
        cs = ca(batch.bundle.e[i : i + 1], epsilon[i : i + 1])
        fake = g(s0, cs.c_hat)
        kl = float(kl_standard_normal(cs.mu, cs.log_sigma)[0])
        terms.append(_log(1.0 - float(d(fake, cs.c_hat)[0])) + lam * kl)
    return sum(terms) / n
