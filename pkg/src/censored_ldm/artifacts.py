"""Saving and loading trained models together with the metadata needed to use them."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE, load_checkpoint, save_checkpoint
from .grid import ChannelSpec
from .models import VAE, Denoiser, DenoiserConfig, LatentStats, VaeConfig
from .schedulers import AdaptiveScheduler


def _num(x: float):
    # JSON has no infinities; keep them as strings
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def specs_to_json(specs) -> list[dict]:
    return [{"name": c.name, "lower": _num(c.lower), "upper": _num(c.upper), "mean": c.mean, "std": c.std,
             "range": c.range} for c in specs]


def specs_from_json(rows) -> tuple[ChannelSpec, ...]:
    return tuple(ChannelSpec(r["name"], float(r["lower"]), float(r["upper"]), float(r["mean"]), float(r["std"]),
                             float(r["range"])) for r in rows)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _prefixed(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _strip(prefix: str, tensors: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def save_vae(path, vae: VAE, specs, mask, dataset: str, extra: dict | None = None) -> str:
    config = {"kind": "vae", "vae": asdict(vae.cfg), "channels": specs_to_json(specs), "dataset": dataset}
    config.update(extra or {})
    tensors = _prefixed("vae", vae)
    tensors["mask"] = torch.as_tensor(np.asarray(mask), dtype=DTYPE)
    return save_checkpoint(path, tensors, config)


def load_vae(path) -> tuple[VAE, dict, np.ndarray, str]:
    """Returns (vae, config, mask, checkpoint fingerprint)."""
    tensors, config, fp = load_checkpoint(path)
    if config.get("kind") != "vae":
        raise ValueError(f"{path}: not a VAE checkpoint")
    vae = VAE(VaeConfig(**config["vae"]))
    vae.load_state_dict(_strip("vae", tensors))
    vae.eval()
    return vae, config, tensors["mask"].numpy().astype(np.uint8), fp


def save_denoiser(path, model: Denoiser, sched: AdaptiveScheduler, specs, mask, dataset: str,
                  latent_stats: LatentStats | None = None, vae_path: str | None = None,
                  vae_fingerprint: str | None = None, extra: dict | None = None) -> str:
    config = {"kind": "denoiser", "denoiser": asdict(model.cfg), "channels": specs_to_json(specs),
              "dataset": dataset, "scheduler": {"n_bins": sched.n_bins, "gamma_min": sched.gamma_min,
                                                "gamma_max": sched.gamma_max, "decay": sched.decay,
                                                "floor": sched.floor}}
    if model.cfg.space == "latent":
        config["vae_path"] = str(vae_path)
        config["vae_fingerprint"] = vae_fingerprint
    config.update(extra or {})
    tensors = _prefixed("denoiser", model)
    tensors["scheduler.bins"] = torch.as_tensor(sched.weights, dtype=DTYPE)
    tensors["mask"] = torch.as_tensor(np.asarray(mask), dtype=DTYPE)
    if latent_stats is not None:
        tensors["latent.mean"] = torch.as_tensor(latent_stats.mean, dtype=DTYPE)
        tensors["latent.std"] = torch.as_tensor(latent_stats.std, dtype=DTYPE)
    return save_checkpoint(path, tensors, config)


def load_denoiser(path):
    """Returns (model, scheduler, latent stats or None, config, mask)."""
    tensors, config, _ = load_checkpoint(path)
    if config.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    model = Denoiser(DenoiserConfig(**config["denoiser"]))
    model.load_state_dict(_strip("denoiser", tensors))
    model.eval()
    sched = AdaptiveScheduler(weights=tensors["scheduler.bins"].numpy().copy(), **config["scheduler"])
    stats = None
    if "latent.mean" in tensors:
        stats = LatentStats(tensors["latent.mean"].numpy().copy(), tensors["latent.std"].numpy().copy())
    return model, sched, stats, config, tensors["mask"].numpy().astype(np.uint8)
