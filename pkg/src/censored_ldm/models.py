"""Desk-scale autoencoder and denoiser built from masked convolutions.

Every spatial convolution multiplies its input by the land mask first, so
land values act as zero padding and never reach a valid output. Masks are
downsampled by 2x2 max pooling: a coarse cell is valid if any of its four
children is.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import DTYPE
from .diffusion import gamma_to_unit
from .distributions import reconstruction_nll


@dataclass
class VaeConfig:
    in_channels: int = 5
    latent_channels: int = 8
    base_width: int = 32
    depth: int = 2
    blocks: int = 2
    beta: float = 1e-3
    loss: str = "censored"

    def __post_init__(self):
        if self.loss not in ("gaussian", "censored"):
            raise ValueError(f"unknown reconstruction loss {self.loss!r}")

    def check_grid(self, h: int, w: int) -> None:
        f = 2 ** self.depth
        if h % f or w % f or h // f < 4 or w // f < 4:
            raise ValueError(f"grid {h}x{w} incompatible with depth {self.depth} (latent must be >= 4x4)")


@dataclass
class DenoiserConfig:
    in_channels: int = 8
    width: int = 32
    depth: int = 1
    blocks: int = 2
    time_embed_dim: int = 64
    space: str = "latent"

    def __post_init__(self):
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.space not in ("latent", "data"):
            raise ValueError(f"space must be 'latent' or 'data', got {self.space!r}")


def _mask4(mask, like: torch.Tensor | None = None) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=DTYPE)
    while m.ndim < 4:
        m = m.unsqueeze(0)
    return m


def mask_downsample(mask):
    """2x2 max pooling of a [H, W] (or [..., H, W]) validity mask."""
    is_np = not torch.is_tensor(mask)
    m = torch.as_tensor(np.asarray(mask), dtype=DTYPE) if is_np else mask.to(DTYPE)
    h, w = m.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"mask dims must be even, got {h}x{w}")
    lead = m.shape[:-2]
    out = F.max_pool2d(m.reshape((-1, 1, h, w)), 2).reshape(lead + (h // 2, w // 2))
    return out.numpy().astype(np.asarray(mask).dtype) if is_np else out


def mask_pyramid(mask, depth: int) -> list[torch.Tensor]:
    ms = [_mask4(mask)]
    for _ in range(depth):
        ms.append(mask_downsample(ms[-1]))
    return ms


def masked_conv(x: torch.Tensor, mask, weight: torch.Tensor, bias: torch.Tensor | None = None,
                stride: int = 1) -> torch.Tensor:
    k = weight.shape[-1]
    pad = k // 2 if k % 2 else 0
    return F.conv2d(x * _mask4(mask), weight, bias, stride=stride, padding=pad)


class MaskedConv2d(nn.Conv2d):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1):
        super().__init__(cin, cout, kernel, stride=stride, padding=kernel // 2 if kernel % 2 else 0)

    def forward(self, x, mask):
        return super().forward(x * mask)


class ChannelNorm(nn.Module):
    """Layer norm across channels at each grid point; never mixes positions."""

    def __init__(self, ch: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ConvBlock(nn.Module):
    """Masked 3x3 conv, channel norm, pointwise MLP with GELU, residual add.

    An optional conditioning vector is projected and added to the features
    after the spatial conv.
    """

    def __init__(self, ch: int, cond_dim: int | None = None, expand: int = 2):
        super().__init__()
        self.conv = MaskedConv2d(ch, ch, 3)
        self.norm = ChannelNorm(ch)
        self.fc1 = nn.Conv2d(ch, ch * expand, 1)
        self.fc2 = nn.Conv2d(ch * expand, ch, 1)
        self.cond = nn.Linear(cond_dim, ch) if cond_dim else None

    def forward(self, x, mask, cond=None):
        h = self.conv(x, mask)
        if self.cond is not None:
            h = h + self.cond(cond)[:, :, None, None]
        h = self.fc2(F.gelu(self.fc1(self.norm(h))))
        return x + h


class Down(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm = ChannelNorm(cin)
        self.conv = MaskedConv2d(cin, cout, 2, stride=2)

    def forward(self, x, mask):
        return self.conv(self.norm(x), mask)


class Up(nn.Module):
    """Nearest-neighbour x2 then a masked 3x3 conv; optional skip concatenation."""

    def __init__(self, cin: int, cout: int, skip: int = 0):
        super().__init__()
        self.norm = ChannelNorm(cin)
        self.conv = MaskedConv2d(cin + skip, cout, 3)

    def forward(self, x, mask_fine, skip=None):
        x = F.interpolate(self.norm(x), scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x, mask_fine)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.base_width
        self.stem = nn.Conv2d(cfg.in_channels, w, 1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = w
        for i in range(cfg.depth + 1):
            self.levels.append(nn.ModuleList(ConvBlock(ch) for _ in range(cfg.blocks)))
            if i < cfg.depth:
                self.downs.append(Down(ch, ch * 2))
                ch *= 2
        self.norm = ChannelNorm(ch)
        self.head = nn.Conv2d(ch, 2 * cfg.latent_channels, 1)
        self.latent_channels = cfg.latent_channels

    def forward(self, x, masks: Sequence[torch.Tensor]):
        h = self.stem(x)
        for i, blocks in enumerate(self.levels):
            for b in blocks:
                h = b(h, masks[i])
            if i < len(self.downs):
                h = self.downs[i](h, masks[i])
        out = self.head(F.relu(self.norm(h)))
        mu, log_sigma = out.split(self.latent_channels, dim=1)
        return mu * masks[-1], log_sigma


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        ch = cfg.base_width * 2 ** cfg.depth
        self.stem = nn.Conv2d(cfg.latent_channels, ch, 1)
        self.levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in range(cfg.depth + 1):
            self.levels.append(nn.ModuleList(ConvBlock(ch) for _ in range(cfg.blocks)))
            if i < cfg.depth:
                self.ups.append(Up(ch, ch // 2))
                ch //= 2
        self.norm = ChannelNorm(ch)
        self.head = nn.Conv2d(ch, cfg.in_channels, 1)

    def forward(self, z, masks: Sequence[torch.Tensor]):
        # masks ordered fine -> coarse
        depth = len(masks) - 1
        h = self.stem(z)
        for i, blocks in enumerate(self.levels):
            m = masks[depth - i]
            for b in blocks:
                h = b(h, m)
            if i < len(self.ups):
                h = self.ups[i](h, masks[depth - i - 1])
        return self.head(F.relu(self.norm(h)))


class VAE(nn.Module):
    """Encoder/decoder pair plus the learned per-channel log output scale."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.log_s = nn.Parameter(torch.zeros(cfg.in_channels))

    def masks(self, mask):
        return mask_pyramid(mask, self.cfg.depth)

    def encode(self, x, mask):
        """(mu_z, sigma_z) of the Gaussian posterior."""
        mu, log_sigma = self.encoder(x, self.masks(mask))
        return mu, torch.exp(log_sigma)

    def decode(self, z, mask):
        return self.decoder(z, self.masks(mask))

    def latent_mask(self, mask) -> torch.Tensor:
        return self.masks(mask)[-1]


def encode(vae: VAE, x, mask):
    return vae.encode(x, mask)


def decode(vae: VAE, z, mask):
    return vae.decode(z, mask)


@dataclass
class VaeLoss:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def gaussian_kl(mu, sigma, mask=None):
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over elements."""
    el = 0.5 * (mu * mu + sigma * sigma - 1.0) - torch.log(sigma)
    if mask is not None:
        el = el * mask
    return el.sum()


def vae_loss(x, mask, vae: VAE, beta: float | None = None, kind: str | None = None,
             lower=None, upper=None, eta=None, generator: torch.Generator | None = None) -> VaeLoss:
    """Single-sample negative ELBO with beta-weighted KL, both divided by batch size."""
    beta = vae.cfg.beta if beta is None else beta
    kind = vae.cfg.loss if kind is None else kind
    masks = vae.masks(mask)
    mu, log_sigma = vae.encoder(x, masks)
    sigma = torch.exp(log_sigma)
    if eta is None:
        eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + sigma * eta
    mu_dec = vae.decoder(z, masks)
    n_ch = x.shape[1]
    lower = [-math.inf] * n_ch if lower is None else lower
    upper = [math.inf] * n_ch if upper is None else upper
    recon = reconstruction_nll(kind, x, mu_dec, vae.log_s, lower, upper, mask)
    kl = gaussian_kl(mu, sigma, masks[-1]) / x.shape[0]
    return VaeLoss(recon + beta * kl, recon, kl)


# ---------------------------------------------------------------------------
# time conditioning and denoiser

def time_embedding(tau, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Interleaved [sin, cos] features at frequencies geometrically spaced in [1, max_freq]."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    tau = torch.as_tensor(tau, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=DTYPE)) if half > 1 \
        else torch.ones(1, dtype=DTYPE)
    ang = tau[:, None] * freqs[None, :]
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(tau.shape[0], dim)


class Denoiser(nn.Module):
    """Small masked U-Net predicting v from (z_tau, gamma)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w, e = cfg.width, cfg.time_embed_dim
        cond = 2 * w
        self.time_mlp = nn.Sequential(nn.Linear(e, cond), nn.GELU(), nn.Linear(cond, cond))
        self.stem = nn.Conv2d(cfg.in_channels, w, 1)
        self.enc = nn.ModuleList()
        self.downs = nn.ModuleList()
        chans = []
        ch = w
        for i in range(cfg.depth):
            self.enc.append(nn.ModuleList(ConvBlock(ch, cond) for _ in range(cfg.blocks)))
            chans.append(ch)
            self.downs.append(Down(ch, ch * 2))
            ch *= 2
        self.mid = nn.ModuleList(ConvBlock(ch, cond) for _ in range(cfg.blocks))
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        for skip in reversed(chans):
            self.ups.append(Up(ch, skip, skip=skip))
            ch = skip
            self.dec.append(nn.ModuleList(ConvBlock(ch, cond) for _ in range(cfg.blocks)))
        self.norm = ChannelNorm(ch)
        self.head = nn.Conv2d(ch, cfg.in_channels, 1)

    def forward(self, z_tau, gamma, mask):
        masks = mask_pyramid(mask, self.cfg.depth)
        gamma = torch.as_tensor(gamma, dtype=DTYPE).reshape(-1).expand(z_tau.shape[0])
        c = self.time_mlp(time_embedding(gamma_to_unit(gamma), self.cfg.time_embed_dim))
        h = self.stem(z_tau)
        skips = []
        for i, blocks in enumerate(self.enc):
            for b in blocks:
                h = b(h, masks[i], c)
            skips.append(h)
            h = self.downs[i](h, masks[i])
        for b in self.mid:
            h = b(h, masks[-1], c)
        for j, (up, blocks) in enumerate(zip(self.ups, self.dec)):
            lvl = self.cfg.depth - 1 - j
            h = up(h, masks[lvl], skips[lvl])
            for b in blocks:
                h = b(h, masks[lvl], c)
        return self.head(F.relu(self.norm(h)))


def denoise_v(z_tau, gamma, mask, model: Denoiser):
    return model(z_tau, gamma, mask)


# ---------------------------------------------------------------------------
# latent normalization

@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def as_dict(self):
        return {"mean": np.asarray(self.mean, dtype=np.float64), "std": np.asarray(self.std, dtype=np.float64)}


def fit_latent_stats(latents, mask=None) -> LatentStats:
    """Per-channel mean/std over samples and valid latent points."""
    z = latents.detach().cpu().numpy() if torch.is_tensor(latents) else np.asarray(latents, dtype=np.float64)
    valid = np.ones(z.shape[2:], dtype=bool) if mask is None else np.asarray(mask).reshape(z.shape[2:]).astype(bool)
    vals = z[:, :, valid]
    mean = vals.mean(axis=(0, 2))
    std = vals.std(axis=(0, 2))
    if np.any(~(std > 0)):
        raise ValueError("zero-variance latent channel")
    return LatentStats(mean, std)


def normalize_latent(z, stats: LatentStats, mask=None):
    m = torch.as_tensor(stats.mean, dtype=DTYPE)[None, :, None, None]
    s = torch.as_tensor(stats.std, dtype=DTYPE)[None, :, None, None]
    out = (torch.as_tensor(z, dtype=DTYPE) - m) / s
    return out if mask is None else out * _mask4(mask)


def denormalize_latent(z, stats: LatentStats, mask=None):
    m = torch.as_tensor(stats.mean, dtype=DTYPE)[None, :, None, None]
    s = torch.as_tensor(stats.std, dtype=DTYPE)[None, :, None, None]
    out = torch.as_tensor(z, dtype=DTYPE) * s + m
    return out if mask is None else out * _mask4(mask)


def config_dict(cfg) -> dict:
    return asdict(cfg)
