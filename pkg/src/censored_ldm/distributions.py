"""Gaussian and censored-Gaussian reconstruction likelihoods.

Tensors follow the [N, K, H, W] layout with per-channel scale ``log_s`` of
shape [K] and bounds given in normalized units. Losses are summed over
channels and valid grid points and divided by the batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .autodiff import DTYPE, log_std_normal_cdf

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CensoredGaussianParams:
    mu: torch.Tensor
    log_s: torch.Tensor
    lower: torch.Tensor
    upper: torch.Tensor

    def __post_init__(self):
        self.lower = torch.as_tensor(self.lower, dtype=DTYPE)
        self.upper = torch.as_tensor(self.upper, dtype=DTYPE)
        if torch.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)


def _chan(t: torch.Tensor, ndim: int) -> torch.Tensor:
    """Broadcast a per-channel vector against [N, K, ...] tensors."""
    return t.reshape((1, -1) + (1,) * (ndim - 2))


def _mask_weights(mask, like: torch.Tensor) -> torch.Tensor:
    if mask is None:
        return torch.ones_like(like)
    m = torch.as_tensor(mask, dtype=like.dtype)
    return m.expand_as(like) if m.ndim == like.ndim else m.reshape((1,) * (like.ndim - m.ndim) + m.shape).expand_as(like)


def clip_to_bounds(y, lower, upper):
    """Project into [lower, upper]; bounds are per channel (shape [K]) or scalars."""
    y = torch.as_tensor(y, dtype=DTYPE)
    lower = torch.as_tensor(lower, dtype=DTYPE)
    upper = torch.as_tensor(upper, dtype=DTYPE)
    if lower.ndim == 1 and y.ndim >= 2:
        lower, upper = _chan(lower, y.ndim), _chan(upper, y.ndim)
    return torch.where(y <= lower, lower, torch.where(y >= upper, upper, y))


def gaussian_nll_elements(x, mu, log_s):
    log_s = _chan(log_s, x.ndim) if x.ndim >= 2 else log_s
    z = (x - mu) * torch.exp(-log_s)
    return 0.5 * (z * z + 2.0 * log_s + LOG_2PI)


def gaussian_nll(x, mu, log_s, mask=None):
    """Sum of per-element Gaussian NLL over channels and valid points, per sample."""
    el = gaussian_nll_elements(x, mu, log_s)
    w = _mask_weights(mask, el)
    return torch.where(w > 0, el, torch.zeros_like(el)).sum() / x.shape[0]


def censored_regions(x, lower, upper, mask=None):
    """Boolean masks (at_lower, at_upper, interior) restricted to valid points."""
    lo = _chan(torch.as_tensor(lower, dtype=DTYPE), x.ndim)
    hi = _chan(torch.as_tensor(upper, dtype=DTYPE), x.ndim)
    valid = _mask_weights(mask, x) > 0
    at_lo = (x == lo) & valid
    at_hi = (x == hi) & valid
    inside = (x > lo) & (x < hi) & valid
    if torch.any(valid & ~(at_lo | at_hi | inside)):
        raise ValueError("observation outside its channel bounds")
    return at_lo, at_hi, inside


def censored_nll_elements(x, params: CensoredGaussianParams, mask=None):
    at_lo, at_hi, inside = censored_regions(x, params.lower, params.upper, mask)
    log_s = _chan(params.log_s, x.ndim)
    inv_s = torch.exp(-log_s)
    # infinite bounds never select their branch; zero them so that the unused
    # branch cannot leak inf * 0 = nan into the backward pass
    lo = torch.nan_to_num(_chan(params.lower, x.ndim), neginf=0.0, posinf=0.0)
    hi = torch.nan_to_num(_chan(params.upper, x.ndim), neginf=0.0, posinf=0.0)
    mu = params.mu
    u_lo = torch.where(at_lo, (lo - mu) * inv_s, torch.zeros_like(mu))
    u_hi = torch.where(at_hi, (mu - hi) * inv_s, torch.zeros_like(mu))
    z = torch.where(inside, (x - mu) * inv_s, torch.zeros_like(mu))
    el = torch.zeros_like(mu)
    el = torch.where(at_lo, -log_std_normal_cdf(u_lo), el)
    el = torch.where(at_hi, -log_std_normal_cdf(u_hi), el)
    el = torch.where(inside, 0.5 * (z * z + 2.0 * log_s + LOG_2PI), el)
    return el


def censored_nll(x, params: CensoredGaussianParams, mask=None):
    """Type-I Tobit NLL: log-CDF terms on the bounds, Gaussian NLL inside."""
    return censored_nll_elements(x, params, mask).sum() / x.shape[0]


def censored_pdf(x, params: CensoredGaussianParams):
    """Point masses at the bounds, scaled Gaussian density inside, zero outside."""
    x = torch.as_tensor(x, dtype=DTYPE)
    mu = torch.as_tensor(params.mu, dtype=DTYPE)
    s = params.s
    lo, hi = params.lower, params.upper
    if x.ndim >= 2 and lo.ndim == 1:
        s, lo, hi = _chan(s, x.ndim), _chan(lo, x.ndim), _chan(hi, x.ndim)
    std_normal = torch.distributions.Normal(torch.zeros((), dtype=DTYPE), torch.ones((), dtype=DTYPE))
    mass_lo = torch.where(torch.isfinite(lo), std_normal.cdf((lo - mu) / s), torch.zeros_like(mu))
    mass_hi = torch.where(torch.isfinite(hi), std_normal.cdf((mu - hi) / s), torch.zeros_like(mu))
    dens = torch.exp(std_normal.log_prob((x - mu) / s)) / s
    out = torch.where((x > lo) & (x < hi), dens, torch.zeros_like(dens))
    out = torch.where(x == lo, mass_lo, out)
    out = torch.where(x == hi, mass_hi, out)
    return out


def reconstruction_nll(kind: str, x, mu, log_s, lower: Sequence[float], upper: Sequence[float], mask=None):
    if kind == "gaussian":
        return gaussian_nll(x, mu, log_s, mask)
    if kind == "censored":
        return censored_nll(x, CensoredGaussianParams(mu, log_s, lower, upper), mask)
    raise ValueError(f"unknown reconstruction loss {kind!r}")
