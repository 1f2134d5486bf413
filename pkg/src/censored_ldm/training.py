"""Training loops for the autoencoder and the diffusion models.

Both loops use the hand-written Adam with warmup + cosine learning rate and
keep the parameters with the lowest validation loss.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .autodiff import Adam, DTYPE, lr_at
from .diffusion import GAMMA_MAX, GAMMA_MIN, diffusion_loss
from .distributions import censored_regions
from .grid import FieldBatch, denormalize, normalize
from .models import VAE, Denoiser, DenoiserConfig, VaeConfig, vae_loss
from .schedulers import AdaptiveScheduler

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    iterations: int = 5000
    warmup: int = 250
    batch_size: int = 16
    lr_min: float = 1e-6
    lr_max: float = 2e-4
    eval_every: int = 250
    n_eval: int = 128

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.warmup > self.iterations:
            raise ValueError("warmup longer than training")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_valid: float = math.inf
    extra: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)


def _tensor(batch: FieldBatch) -> torch.Tensor:
    return torch.as_tensor(batch.data, dtype=DTYPE)


def normalized_bounds(batch: FieldBatch) -> tuple[list[float], list[float]]:
    lo, hi = zip(*(c.normalized_bounds() for c in batch.channels))
    return list(lo), list(hi)


def branch_shares(batch: FieldBatch) -> dict[str, float]:
    """Fraction of valid points on the lower bound, upper bound and interior."""
    x = _tensor(batch)
    lo, hi = normalized_bounds(batch)
    at_lo, at_hi, inside = censored_regions(x, lo, hi, torch.as_tensor(batch.mask, dtype=DTYPE))
    total = float(at_lo.sum() + at_hi.sum() + inside.sum())
    return {"lower": float(at_lo.sum()) / total, "upper": float(at_hi.sum()) / total,
            "interior": float(inside.sum()) / total}


def train_vae(train: FieldBatch, valid: FieldBatch, cfg: VaeConfig, opt: OptimConfig, seed: int = 0,
              callback: Callable[[dict], None] | None = None) -> tuple[VAE, History]:
    """``train``/``valid`` are normalized batches."""
    if not (train.normalized and valid.normalized):
        raise ValueError("train_vae expects normalized batches")
    h, w = train.data.shape[2:]
    cfg.check_grid(h, w)
    torch.manual_seed(seed)
    vae = VAE(cfg)
    optim = Adam(vae.named_parameters())
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    x_all = _tensor(train)
    mask = torch.as_tensor(train.mask, dtype=DTYPE)
    lo, hi = normalized_bounds(train)
    x_val = _tensor(valid)[: opt.n_eval]

    def valid_loss() -> float:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            return float(vae_loss(x_val, mask, vae, lower=lo, upper=hi, generator=g).total)

    hist = History()
    if cfg.loss == "censored":
        hist.extra["branch_shares"] = branch_shares(train)
    best = copy.deepcopy(vae.state_dict())
    for it in range(1, opt.iterations + 1):
        idx = rng.choice(train.n, size=opt.batch_size, replace=False)
        lr = lr_at(it, opt.warmup, opt.iterations, opt.lr_min, opt.lr_max)
        optim.zero_grad()
        out = vae_loss(x_all[idx], mask, vae, lower=lo, upper=hi, generator=gen)
        if not torch.isfinite(out.total):
            raise FloatingPointError(f"non-finite VAE loss at iteration {it}")
        out.total.backward()
        optim.step(lr)
        row = {"iteration": it, "lr": lr, "loss": out.total.item(), "recon": out.recon.item(), "kl": out.kl.item()}
        if it % opt.eval_every == 0 or it == opt.iterations:
            row["valid"] = valid_loss()
            if row["valid"] < hist.best_valid:
                hist.best_valid, hist.best_iteration = row["valid"], it
                best = copy.deepcopy(vae.state_dict())
            log.info("vae it=%d loss=%.4f valid=%.4f", it, row["loss"], row["valid"])
        hist.add(**row)
        if callback:
            callback(row)
    vae.load_state_dict(best)
    vae.eval()
    return vae, hist


@torch.no_grad()
def encode_mean(vae: VAE, batch: FieldBatch, chunk: int = 256) -> torch.Tensor:
    """Deterministic latents: the encoder mean, evaluated in chunks."""
    mask = torch.as_tensor(batch.mask, dtype=DTYPE)
    x = _tensor(batch)
    return torch.cat([vae.encode(x[i:i + chunk], mask)[0] for i in range(0, x.shape[0], chunk)])


class _Uniform:
    """Linear gamma(tau); used for schedule-independent validation losses."""

    def __init__(self, gamma_min=GAMMA_MIN, gamma_max=GAMMA_MAX):
        self.gmin, self.gmax = gamma_min, gamma_max

    def gamma_and_neg_slope(self, tau):
        tau = torch.as_tensor(tau, dtype=DTYPE)
        return self.gmax - (self.gmax - self.gmin) * tau, torch.full_like(tau, self.gmax - self.gmin)


def train_diffusion(z_train: torch.Tensor, z_valid: torch.Tensor, mask, cfg: DenoiserConfig, opt: OptimConfig,
                    seed: int = 0, weighting: str = "sigmoid", scheduler: AdaptiveScheduler | None = None,
                    callback: Callable[[dict], None] | None = None) -> tuple[Denoiser, AdaptiveScheduler, History]:
    """Train a v-prediction denoiser on normalized states ``z`` [N, C, h, w]."""
    from .diffusion import stratified_times

    torch.manual_seed(seed)
    model = Denoiser(cfg)
    sched = scheduler or AdaptiveScheduler()
    optim = Adam(model.named_parameters())
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    mask = torch.as_tensor(mask, dtype=DTYPE)
    net = lambda z, g: model(z, g, mask)

    z_val = z_valid[: opt.n_eval]
    val_rng = np.random.default_rng(seed + 1)
    val_tau = torch.as_tensor(stratified_times(z_val.shape[0], val_rng), dtype=DTYPE)
    val_eps = torch.as_tensor(val_rng.standard_normal(tuple(z_val.shape)), dtype=DTYPE)
    uniform = _Uniform(sched.gamma_min, sched.gamma_max)

    def valid_loss() -> float:
        with torch.no_grad():
            return float(diffusion_loss(z_val, val_tau, net, uniform, weighting, mask, eps=val_eps)[0])

    hist = History()
    best = copy.deepcopy(model.state_dict())
    for it in range(1, opt.iterations + 1):
        idx = rng.choice(z_train.shape[0], size=opt.batch_size, replace=False)
        tau = torch.as_tensor(stratified_times(opt.batch_size, rng), dtype=DTYPE)
        lr = lr_at(it, opt.warmup, opt.iterations, opt.lr_min, opt.lr_max)
        optim.zero_grad()
        try:
            loss, terms, gamma = diffusion_loss(z_train[idx], tau, net, sched, weighting, mask, generator=gen)
        except FloatingPointError as err:
            raise FloatingPointError(f"{err} at iteration {it}") from None
        loss.backward()
        optim.step(lr)
        sched.update(gamma.numpy(), terms.numpy())
        row = {"iteration": it, "lr": lr, "loss": loss.item()}
        if it % opt.eval_every == 0 or it == opt.iterations:
            row["valid"] = valid_loss()
            if row["valid"] < hist.best_valid:
                hist.best_valid, hist.best_iteration = row["valid"], it
                best = copy.deepcopy(model.state_dict())
            log.info("diffusion it=%d loss=%.4f valid=%.4f", it, row["loss"], row["valid"])
        hist.add(**row)
        if callback:
            callback(row)
    model.load_state_dict(best)
    model.eval()
    return model, sched, hist


@torch.no_grad()
def reconstruct(vae: VAE, batch: FieldBatch, clip: bool | None = None, chunk: int = 256) -> FieldBatch:
    """Encoder mean -> decoder mean, in data units.

    Bounded channels are clipped when ``clip`` is set; by default that is the
    case for a censored decoder.
    """
    if batch.normalized:
        raise ValueError("reconstruct expects data units")
    norm = normalize(batch)
    mask = torch.as_tensor(batch.mask, dtype=DTYPE)
    z = encode_mean(vae, norm, chunk)
    mu = torch.cat([vae.decode(z[i:i + chunk], mask) for i in range(0, z.shape[0], chunk)])
    rec = denormalize(FieldBatch(mu.numpy(), batch.mask, batch.channels, normalized=True))
    data = rec.data
    if clip if clip is not None else vae.cfg.loss == "censored":
        lower = np.array([c.lower for c in batch.channels])[None, :, None, None]
        upper = np.array([c.upper for c in batch.channels])[None, :, None, None]
        data = np.minimum(np.maximum(data, lower), upper)
    return FieldBatch(np.where(batch.mask.astype(bool), data, 0.0), batch.mask, batch.channels)


def feature_encoder(vae: VAE, chunk: int = 256) -> Callable[[FieldBatch], np.ndarray]:
    """Maps a batch in data units to flattened encoder means (the FAED features)."""

    def encode(batch: FieldBatch) -> np.ndarray:
        z = encode_mean(vae, normalize(batch), chunk)
        return z.reshape(z.shape[0], -1).numpy()

    return encode
