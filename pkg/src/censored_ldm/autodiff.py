"""Numerics on top of torch's reverse-mode engine.

Everything here runs in float64. The module provides the log normal CDF with
a tail-safe forward and an analytic backward, a hand-written Adam, the
warmup + cosine learning-rate schedule, a central-difference gradient checker
and the binary checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# below this, erfc(-u/sqrt2) loses relative accuracy; switch to the scaled form
_TAIL = -6.0


def _log_ndtr_forward(u: torch.Tensor) -> torch.Tensor:
    out = torch.empty_like(u)
    lo = u < _TAIL
    hi = u > 0
    mid = ~(lo | hi)
    # deep lower tail: erfc(t) = erfcx(t) * exp(-t^2) keeps every digit
    t = -u[lo] / _SQRT2
    out[lo] = torch.log(0.5 * torch.special.erfcx(t)) - t * t
    out[mid] = torch.log(0.5 * torch.special.erfc(-u[mid] / _SQRT2))
    # upper half: log(1 - Q) with Q tiny, needs log1p
    out[hi] = torch.log1p(-0.5 * torch.special.erfc(u[hi] / _SQRT2))
    return out


def _inverse_mills(u: torch.Tensor) -> torch.Tensor:
    """phi(u) / Phi(u), i.e. d/du log Phi(u)."""
    out = torch.empty_like(u)
    lo = u < _TAIL
    out[lo] = _SQRT_2_OVER_PI / torch.special.erfcx(-u[lo] / _SQRT2)
    rest = ~lo
    ur = u[rest]
    out[rest] = torch.exp(-0.5 * ur * ur - _LOG_SQRT_2PI - _log_ndtr_forward(ur))
    return out


class _LogNdtr(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u):
        ctx.save_for_backward(u)
        return _log_ndtr_forward(u)

    @staticmethod
    def backward(ctx, grad_out):
        (u,) = ctx.saved_tensors
        return grad_out * _inverse_mills(u)


def log_std_normal_cdf(u: torch.Tensor) -> torch.Tensor:
    """log Phi(u), finite for every finite u, differentiable."""
    if not torch.is_tensor(u):
        u = torch.as_tensor(u, dtype=DTYPE)
    return _LogNdtr.apply(u)


# ---------------------------------------------------------------------------
# optimizer and schedule

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


class NonFiniteGradientError(FloatingPointError):
    pass


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update applied in place; no weight decay."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))


class Adam:
    """Thin stateful wrapper around :func:`adam_step` for an ``nn.Module``."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], **kw):
        self.params = dict(named_params)
        self.state = OptimizerState(**kw)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, lr)


def lr_at(iteration: int, warmup_iters: int, total_iters: int, lr_min: float, lr_max: float) -> float:
    """Linear warmup lr_min -> lr_max, then cosine decay back to lr_min at total_iters."""
    if warmup_iters > total_iters:
        raise ValueError(f"warmup_iters ({warmup_iters}) > total_iters ({total_iters})")
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    if iteration < warmup_iters:
        return lr_min + (lr_max - lr_min) * iteration / warmup_iters
    decay = total_iters - warmup_iters
    if decay == 0:
        return lr_max
    frac = (iteration - warmup_iters) / decay
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
               step: float = 1e-3, tolerance: float = 1e-4, max_per_param: int | None = None,
               floor: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``params`` are leaf tensors read by ``loss_fn``. At most ``max_per_param``
    randomly chosen coordinates are probed per tensor. The relative error of a
    coordinate is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
        p.requires_grad_(True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    per_param = {}
    total = 0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and idx.size > max_per_param:
                idx = rng.choice(idx, size=max_per_param, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = loss_fn().item()
                flat[i] = orig - step
                f_minus = loss_fn().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                ad = g.view(-1)[i].item()
                err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
                worst = max(worst, err)
            per_param[name] = worst
            total += idx.size
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, total, tolerance)


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   "CKPT" | u32 version | u32 len + fingerprint (ascii) | u32 len + config json
#   | u32 count | count x (u32 len + name | u32 ndim | u32 dims[ndim] | f64 data)

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_fingerprint(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor | np.ndarray], config: Mapping) -> str:
    fp = config_fingerprint(config)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_str(fp),
             _pack_str(json.dumps(config, sort_keys=True, default=str)), struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))
    return fp


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode()


def load_checkpoint(path, expect_fingerprint: str | None = None) -> tuple[dict[str, torch.Tensor], dict, str]:
    """Returns (tensors, config, fingerprint)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if r.u32() != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    fp = r.string()
    config = json.loads(r.string())
    if config_fingerprint(config) != fp:
        raise CheckpointError(f"{path}: config does not match its fingerprint")
    if expect_fingerprint is not None and fp != expect_fingerprint:
        raise CheckpointError(f"{path}: fingerprint {fp} != expected {expect_fingerprint}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return tensors, config, fp
