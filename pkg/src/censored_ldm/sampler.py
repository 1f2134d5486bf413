"""Probability-flow ODE sampling with a second-order Heun integrator.

The state is integrated in pseudo-time tau from 1 (noise) to 0 over the EDM
grid; after the last Heun step the denoiser output at the final node is
emitted as the sample.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import DTYPE
from .diffusion import GAMMA_MAX, GAMMA_MIN, denoised_from_v, gamma_to_alpha_sigma
from .distributions import clip_to_bounds
from .grid import ChannelSpec, FieldBatch, denormalize
from .models import LatentStats, denormalize_latent
from .schedulers import EdmSchedule

log = logging.getLogger(__name__)

# beyond this log-SNR sigma^2 = sigmoid(-gamma) is below ~4e-18 and alpha / sigma blows up
GAMMA_LIMIT = 40.0

VModel = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class FingerprintMismatch(ValueError):
    pass


@dataclass
class SamplerConfig:
    n_steps: int = 20
    rho: float = 7.0
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX
    clip_denoiser: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def schedule(self) -> EdmSchedule:
        return EdmSchedule(self.n_steps, self.rho, self.gamma_min, self.gamma_max)


class CountingModel:
    """Wraps a v-model and counts its evaluations."""

    def __init__(self, model: VModel):
        self.model = model
        self.calls = 0

    def __call__(self, z, gamma):
        self.calls += 1
        return self.model(z, gamma)


def score_from_v(z_tau, v_hat, gamma):
    """s = -(z_tau + (alpha / sigma) v_hat)."""
    gamma = torch.as_tensor(gamma, dtype=DTYPE)
    if torch.any(gamma >= GAMMA_LIMIT):
        raise ValueError(f"log-SNR {float(gamma.max())} >= {GAMMA_LIMIT}: sigma underflows")
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    return -(z_tau + (alpha / sigma) * v_hat)


def clip_denoiser_mode(denoised, lower, upper):
    """Clip the denoised estimate into (normalized) physical bounds."""
    return clip_to_bounds(denoised, lower, upper)


def _v_with_clip(model: VModel, z, gamma, bounds):
    v_hat = model(z, gamma)
    if bounds is None:
        return v_hat
    alpha, sigma = gamma_to_alpha_sigma(gamma)
    d = clip_denoiser_mode(alpha * z - sigma * v_hat, *bounds)
    # v that reproduces the clipped denoiser, so the score is recomputed from it
    return (alpha * z - d) / sigma


def ode_rhs(z_tau, tau: float, schedule: EdmSchedule, model: VModel, bounds=None):
    """dz/dtau = -L'/2 z - L'/2 s(z, tau) with L' = d/dtau log(1 + e^-gamma)."""
    gamma = torch.as_tensor(schedule.gamma(tau), dtype=DTYPE)
    lp = float(schedule.log1p_exp_neg_gamma_slope(tau))
    v_hat = _v_with_clip(model, z_tau, gamma, bounds)
    s = score_from_v(z_tau, v_hat, gamma)
    return -0.5 * lp * z_tau - 0.5 * lp * s


def heun_integrate(config: SamplerConfig, model: VModel, z_init: torch.Tensor, bounds=None) -> torch.Tensor:
    """n_steps Heun steps of the probability-flow ODE from tau = 1 to tau = 0 (2 model calls each)."""
    sched = config.schedule
    taus = sched.taus()
    z = z_init.to(DTYPE)
    with torch.no_grad():
        for i in range(config.n_steps):
            t, t_next = float(taus[i]), float(taus[i + 1])
            h = t_next - t
            d1 = ode_rhs(z, t, sched, model, bounds)
            z_euler = z + h * d1
            d2 = ode_rhs(z_euler, t_next, sched, model, bounds)
            z = z + 0.5 * h * (d1 + d2)
            if not torch.all(torch.isfinite(z)):
                raise FloatingPointError(f"non-finite sampler state at step {i}")
    return z


def heun_sample(config: SamplerConfig, model: VModel, shape: Sequence[int] | None = None,
                generator: torch.Generator | None = None, z_init: torch.Tensor | None = None,
                bounds=None) -> torch.Tensor:
    """Integrate from z_1 ~ N(0, I) and emit the denoiser output at the last node.

    Uses exactly 2 n_steps + 1 model calls. ``bounds`` = (lower, upper) in
    normalized units is required by the clipped-denoiser mode.
    """
    if z_init is None:
        if shape is None:
            raise ValueError("need shape or z_init")
        z_init = torch.randn(tuple(shape), generator=generator, dtype=DTYPE)
    if bounds is None and config.clip_denoiser:
        raise ValueError("clip_denoiser requires bounds")
    bounds = bounds if config.clip_denoiser else None
    z = heun_integrate(config, model, z_init, bounds)
    with torch.no_grad():
        gamma = torch.as_tensor(config.schedule.gamma(0.0), dtype=DTYPE)
        out = denoised_from_v(z, _v_with_clip(model, z, gamma, bounds), gamma)
        if bounds is not None:
            out = clip_denoiser_mode(out, *bounds)
    if not torch.all(torch.isfinite(out)):
        raise FloatingPointError(f"non-finite sampler output at step {config.n_steps}")
    return out


def check_fingerprint(expected: str | None, found: str | None, what: str = "checkpoint") -> None:
    if expected and found and expected != found:
        raise FingerprintMismatch(f"{what} was fitted on dataset {found}, expected {expected}")


@dataclass
class GenerateResult:
    batch: FieldBatch
    latency: np.ndarray = field(default_factory=lambda: np.zeros(0))


def generate(model: VModel, config: SamplerConfig, n: int, channels: Sequence[ChannelSpec], mask: np.ndarray,
             vae=None, latent_stats: LatentStats | None = None, latent_channels: int | None = None,
             censored: bool = False, clip_output: bool = False, chunk: int = 100,
             expected_fingerprint: str | None = None, fingerprint: str | None = None) -> GenerateResult:
    """Draw ``n`` samples in data units.

    With ``vae`` the ODE runs in its latent space (denormalized with
    ``latent_stats`` then decoded); without it the state is the normalized
    data itself. Bounded channels are clipped when ``censored`` or
    ``clip_output`` is set, and land is zeroed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    check_fingerprint(expected_fingerprint, fingerprint)
    channels = tuple(channels)
    mask_t = torch.as_tensor(mask, dtype=DTYPE)
    if vae is not None:
        if latent_stats is None:
            raise ValueError("latent sampling needs latent statistics")
        state_mask = vae.latent_mask(mask_t)
        c = latent_channels or vae.cfg.latent_channels
    else:
        state_mask = mask_t
        c = len(channels)
    state_mask = state_mask.reshape(1, 1, *state_mask.shape[-2:])
    shape = (n, c) + tuple(state_mask.shape[-2:])
    gen = torch.Generator().manual_seed(config.seed)
    z1 = torch.randn(shape, generator=gen, dtype=DTYPE) * state_mask

    lo, hi = zip(*(ch.normalized_bounds() for ch in channels))
    bounds = None
    if config.clip_denoiser:
        if vae is not None:
            raise ValueError("denoiser clipping applies to data-space models only")
        bounds = (torch.tensor(lo, dtype=DTYPE), torch.tensor(hi, dtype=DTYPE))

    def v_model(z, g):
        return model(z, g) * state_mask

    out, latency = [], np.zeros(n)
    for start in range(0, n, chunk):
        t0 = time.perf_counter()
        z = heun_sample(config, v_model, z_init=z1[start:start + chunk], bounds=bounds)
        with torch.no_grad():
            if vae is not None:
                z = denormalize_latent(z, latent_stats, state_mask)
                x = vae.decode(z, mask_t)
            else:
                x = z
        stop = min(start + chunk, n)
        latency[start:stop] = (time.perf_counter() - t0) / (stop - start)
        out.append(x)
    x = torch.cat(out).numpy()
    batch = denormalize(FieldBatch(x, np.asarray(mask, dtype=np.uint8), channels, normalized=True))
    data = batch.data
    if censored or clip_output:
        lower = np.array([ch.lower for ch in channels])[None, :, None, None]
        upper = np.array([ch.upper for ch in channels])[None, :, None, None]
        data = np.minimum(np.maximum(data, lower), upper)
    data = np.where(batch.mask.astype(bool), data, 0.0)
    log.info("generated %d samples, %.4f s/sample", n, latency.mean())
    return GenerateResult(FieldBatch(data, batch.mask, channels), latency)
