"""Variance-preserving diffusion in log-SNR parameterization with v-targets.

Orientation: tau = 0 is clean data (gamma = gamma_max), tau = 1 is pure
noise (gamma = gamma_min).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import DTYPE

GAMMA_MIN = -15.0
GAMMA_MAX = 15.0


@dataclass
class DiffusionState:
    z_tau: torch.Tensor
    tau: torch.Tensor
    gamma: torch.Tensor
    alpha: torch.Tensor
    sigma: torch.Tensor
    eps: torch.Tensor


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=DTYPE)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Per-sample scalars [N] against [N, ...] tensors; scalars pass through."""
    if v.ndim == 0 or like.ndim <= 1:
        return v
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def gamma_to_alpha_sigma(gamma):
    """alpha^2 = sigmoid(gamma), sigma^2 = sigmoid(-gamma)."""
    gamma = _t(gamma)
    return torch.sqrt(torch.sigmoid(gamma)), torch.sqrt(torch.sigmoid(-gamma))


def forward_noise(z_x, gamma, eps):
    z_x, eps = _t(z_x), _t(eps)
    if z_x.shape != eps.shape:
        raise ValueError(f"shape mismatch: z_x {tuple(z_x.shape)} vs eps {tuple(eps.shape)}")
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    return _bcast(alpha, z_x) * z_x + _bcast(sigma, z_x) * eps


def diffuse(z_x, tau, gamma, eps) -> DiffusionState:
    gamma = _t(gamma)
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    return DiffusionState(forward_noise(z_x, gamma, eps), _t(tau), gamma, alpha, sigma, _t(eps))


def v_target(z_x, eps, gamma):
    z_x, eps = _t(z_x), _t(eps)
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    return _bcast(alpha, z_x) * eps - _bcast(sigma, z_x) * z_x


def denoised_from_v(z_tau, v_hat, gamma):
    z_tau, v_hat = _t(z_tau), _t(v_hat)
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    return _bcast(alpha, z_tau) * z_tau - _bcast(sigma, z_tau) * v_hat


def loss_weight(gamma, kind: str = "sigmoid"):
    """External weighting: 'elbo' is w = 1, 'sigmoid' is w = exp(-gamma / 2)."""
    gamma = _t(gamma)
    if kind == "elbo":
        return torch.ones_like(gamma)
    if kind == "sigmoid":
        return torch.exp(-0.5 * gamma)
    raise ValueError(f"unknown weighting {kind!r}")


def _sq_norm(x: torch.Tensor, mask=None) -> torch.Tensor:
    if mask is not None:
        x = x * _t(mask)
    return (x * x).reshape(x.shape[0], -1).sum(dim=1)


def v_loss_terms(v, v_hat, gamma, weighting: str = "sigmoid", mask=None):
    """Per-sample w(gamma) (1 + e^-gamma)^-1 ||v - v_hat||^2, without -dgamma/dtau."""
    gamma = _t(gamma)
    return loss_weight(gamma, weighting) * torch.sigmoid(gamma) * _sq_norm(v - v_hat, mask)


def diffusion_loss_v(v, v_hat, gamma, neg_dgamma_dtau, weighting: str = "sigmoid", mask=None):
    """Batch mean of w(gamma) (-dgamma/dtau) (1 + e^-gamma)^-1 ||v - v_hat||^2."""
    per = _t(neg_dgamma_dtau) * v_loss_terms(v, v_hat, gamma, weighting, mask)
    loss = per.mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite diffusion loss")
    return loss


def diffusion_loss_z(z_x, denoised, gamma, neg_dgamma_dtau, weighting: str = "sigmoid", mask=None):
    """Same loss written on the denoised state: w (-dgamma/dtau) e^gamma ||z_x - D||^2."""
    gamma = _t(gamma)
    per = loss_weight(gamma, weighting) * _t(neg_dgamma_dtau) * torch.exp(gamma) * _sq_norm(z_x - denoised, mask)
    return per.mean()


def diffusion_loss(z_x, tau, model: Callable, schedule, weighting: str = "sigmoid", mask=None,
                   eps=None, generator: torch.Generator | None = None):
    """Draws noise, evaluates the v-prediction ``model(z_tau, gamma)`` and returns
    ``(loss, per_sample_terms, gamma)``.

    ``schedule.gamma_and_neg_slope(tau)`` must return (gamma, -dgamma/dtau);
    ``per_sample_terms`` are the detached loss integrands for adaptive-scheduler
    updates.
    """
    tau = _t(tau)
    gamma, neg_slope = schedule.gamma_and_neg_slope(tau)
    if eps is None:
        eps = torch.randn(z_x.shape, generator=generator, dtype=z_x.dtype)
    z_tau = forward_noise(z_x, gamma, eps)
    if mask is not None:
        z_tau = z_tau * _t(mask)
    v = v_target(z_x, eps, gamma)
    v_hat = model(z_tau, gamma)
    terms = v_loss_terms(v, v_hat, gamma, weighting, mask)
    loss = (neg_slope * terms).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite diffusion loss")
    return loss, terms.detach(), gamma


def prior_kl(z_x, gamma_min: float = GAMMA_MIN, mask=None):
    """KL(q(z_1 | z_x) || N(0, I)) summed over latent dimensions."""
    z_x = _t(z_x)
    g = torch.as_tensor(gamma_min, dtype=z_x.dtype)
    alpha2 = torch.sigmoid(g)
    # sigma^2 - 1 - log sigma^2 = -alpha^2 + softplus(gamma)
    const = F.softplus(g) - alpha2
    el = 0.5 * (const + alpha2 * z_x * z_x)
    if mask is not None:
        el = el * _t(mask)
    return el.sum()


def stratified_times(batch_size: int, rng: np.random.Generator | None = None, u=None) -> np.ndarray:
    """tau_b = (b + u_b) / B with independent uniforms, one draw per stratum."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if u is None:
        u = (rng or np.random.default_rng()).random(batch_size)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (batch_size,))
    return (np.arange(batch_size) + u) / batch_size


def gamma_to_unit(gamma, gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX):
    """Map log-SNR linearly onto [0, 1] (0 clean, 1 noise); the denoiser's conditioning input."""
    return (gamma_max - _t(gamma)) / (gamma_max - gamma_min)
