"""Field containers, normalization, the FGRD file format and a synthetic
bounded-field generator.

Land points are stored as exact zeros in data units, so masked convolutions
can treat them like zero padding without any special casing.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_CHANNEL = struct.Struct("<Bfffff")
# guards against absurd headers before allocating
_MAX_ELEMENTS = 2**34


class FgrdFormatError(ValueError):
    """Raised for malformed or truncated FGRD files."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    lower: float = -math.inf
    upper: float = math.inf
    mean: float = math.nan
    std: float = math.nan
    range: float = math.nan

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"channel {self.name!r}: lower bound {self.lower} must be < upper {self.upper}")

    @property
    def fitted(self) -> bool:
        return bool(np.isfinite(self.mean) and self.std > 0 and self.range > 0)

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) or math.isfinite(self.upper)

    def normalized_bounds(self) -> tuple[float, float]:
        # Same arithmetic as `normalize` so that data on a bound compares equal.
        lo = (np.float64(self.lower) - np.float64(self.mean)) / np.float64(self.std)
        hi = (np.float64(self.upper) - np.float64(self.mean)) / np.float64(self.std)
        return float(lo), float(hi)


@dataclass(frozen=True, eq=False)
class FieldBatch:
    """N samples of K gridded channels on an H x W grid with a shared land mask.

    ``data`` is float32 in data units (or float64 once normalized); ``mask`` is
    uint8 with 1 for valid (ocean) points.
    """

    data: np.ndarray
    mask: np.ndarray
    channels: tuple[ChannelSpec, ...]
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"data must be [N, K, H, W], got shape {self.data.shape}")
        if self.mask.shape != self.data.shape[2:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match grid {self.data.shape[2:]}")
        if len(self.channels) != self.data.shape[1]:
            raise ValueError(f"{len(self.channels)} channel specs for {self.data.shape[1]} channels")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "FieldBatch":
        return replace(self, data=self.data[index])

    def with_channels(self, channels: Sequence[ChannelSpec]) -> "FieldBatch":
        return replace(self, channels=tuple(channels))

    def check_bounds(self) -> None:
        """Raise if any valid value lies outside its channel bounds."""
        if self.normalized:
            raise ValueError("bound check expects data units")
        valid = self.mask.astype(bool)
        for k, spec in enumerate(self.channels):
            vals = self.data[:, k][:, valid]
            if np.any(vals < spec.lower) or np.any(vals > spec.upper):
                raise ValueError(f"channel {spec.name!r} violates bounds [{spec.lower}, {spec.upper}]")


@dataclass(frozen=True)
class DatasetSplits:
    train: FieldBatch
    valid: FieldBatch
    test: FieldBatch

    def __post_init__(self):
        for other in (self.valid, self.test):
            if not np.array_equal(other.mask, self.train.mask):
                raise ValueError("splits must share one land mask")
            if other.channels != self.train.channels:
                raise ValueError("splits must share channel specs")


def dataset_fingerprint(batch: FieldBatch) -> str:
    """Hash of mask and channel specs; identifies which dataset a model was fitted on."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.mask, dtype=np.uint8).tobytes())
    for c in batch.channels:
        h.update(repr((c.name, c.lower, c.upper, np.float32(c.mean).item(), np.float32(c.std).item(),
                       np.float32(c.range).item())).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# normalization

def fit_normalization(train: FieldBatch) -> tuple[ChannelSpec, ...]:
    """Per-channel mean, std and range over valid points of the training split."""
    if train.n == 0:
        raise ValueError("cannot fit normalization on an empty batch")
    valid = train.mask.astype(bool)
    if not valid.any():
        raise ValueError("mask has no valid points")
    specs = []
    for k, spec in enumerate(train.channels):
        vals = train.data[:, k][:, valid].astype(np.float64).ravel()
        mean = vals.mean()
        std = vals.std()
        if not std > 0:
            raise ValueError(f"channel {spec.name!r} has zero variance")
        specs.append(replace(spec, mean=float(mean), std=float(std), range=float(vals.max() - vals.min())))
    return tuple(specs)


def _stats(specs: Sequence[ChannelSpec], k: int) -> tuple[np.ndarray, np.ndarray]:
    mean = np.array([s.mean for s in specs], dtype=np.float64)
    std = np.array([s.std for s in specs], dtype=np.float64)
    if len(specs) != k:
        raise ValueError(f"{len(specs)} channel specs for {k} channels")
    if not all(s.fitted for s in specs):
        raise ValueError("channel specs are not fitted")
    return mean[None, :, None, None], std[None, :, None, None]


def normalize(batch: FieldBatch, specs: Sequence[ChannelSpec] | None = None) -> FieldBatch:
    specs = tuple(specs) if specs is not None else batch.channels
    mean, std = _stats(specs, batch.data.shape[1])
    out = np.where(batch.mask.astype(bool), (batch.data.astype(np.float64) - mean) / std, 0.0)
    return FieldBatch(out, batch.mask, specs, normalized=True)


def denormalize(batch: FieldBatch, specs: Sequence[ChannelSpec] | None = None) -> FieldBatch:
    specs = tuple(specs) if specs is not None else batch.channels
    mean, std = _stats(specs, batch.data.shape[1])
    out = np.where(batch.mask.astype(bool), np.asarray(batch.data, dtype=np.float64) * std + mean, 0.0)
    return FieldBatch(out, batch.mask, specs, normalized=False)


# ---------------------------------------------------------------------------
# synthetic data

CHANNEL_TEMPLATE = (
    ChannelSpec("thickness", 0.0, math.inf),
    ChannelSpec("concentration", 0.0, 1.0),
    ChannelSpec("velocity_x"),
    ChannelSpec("velocity_y"),
    ChannelSpec("damage", 0.0, 1.0),
)


def gaussian_random_field(rng: np.random.Generator, n: int, h: int, w: int, exponent: float = -3.0) -> np.ndarray:
    """White noise filtered to a power-law spectrum P(k) ~ k**exponent, unit std per sample."""
    ky = np.fft.fftfreq(h)[:, None] * h
    kx = np.fft.rfftfreq(w)[None, :] * w
    k = np.hypot(ky, kx)
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (exponent / 2.0)
    noise = rng.standard_normal((n, h, w))
    field_ = np.fft.irfft2(np.fft.rfft2(noise) * amp, s=(h, w))
    field_ -= field_.mean(axis=(1, 2), keepdims=True)
    field_ /= field_.std(axis=(1, 2), keepdims=True)
    return field_


def random_land_mask(rng: np.random.Generator, h: int, w: int,
                     coverage: tuple[float, float] = (0.05, 0.20)) -> np.ndarray:
    """Union of 1-3 random disks covering a fraction of the grid within ``coverage``."""
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(1000):
        land = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.08, 0.25) * min(h, w)
            land |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        if coverage[0] <= land.mean() <= coverage[1]:
            return (~land).astype(np.uint8)
    raise RuntimeError("could not draw a land mask with the requested coverage")


def generate_synthetic(n: int, h: int, w: int, seed, mask: np.ndarray | None = None,
                       exponent: float = -3.0) -> FieldBatch:
    """Five bounded/unbounded channels that mimic thickness, concentration,
    two velocity components and damage.

    Thickness is zero over open water (lower bound attained), concentration and
    damage hit both 0 and 1. ``seed`` is anything accepted by
    ``np.random.default_rng``.
    """
    if h < 16 or w < 16:
        raise ValueError(f"grid must be at least 16x16, got {h}x{w}")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    if mask is None:
        mask = random_land_mask(rng, h, w)
    elif mask.shape != (h, w):
        raise ValueError("mask shape does not match grid")

    g_ice = gaussian_random_field(rng, n, h, w, exponent)
    g_aux = gaussian_random_field(rng, n, h, w, exponent)
    g_u = gaussian_random_field(rng, n, h, w, exponent)
    g_v = gaussian_random_field(rng, n, h, w, exponent)
    g_dmg = gaussian_random_field(rng, n, h, w, exponent)
    # a per-sample offset moves the ice edge around between samples
    offset = rng.uniform(-0.3, 0.8, size=(n, 1, 1))

    ice = g_ice + offset
    thickness = 1.5 * np.maximum(ice, 0.0)
    concentration = np.clip(0.5 + 0.8 * (0.8 * ice + 0.2 * g_aux), 0.0, 1.0)
    u = 0.1 * g_u
    v = 0.1 * g_v
    damage = np.clip(0.3 + 0.5 * g_dmg, 0.0, 1.0)

    data = np.stack([thickness, concentration, u, v, damage], axis=1).astype(np.float32)
    data = np.where(mask.astype(bool), data, np.float32(0.0))
    return FieldBatch(data, mask.astype(np.uint8), CHANNEL_TEMPLATE)


def generate_splits(n_train: int, n_valid: int, n_test: int, size: int, seed: int,
                    exponent: float = -3.0) -> DatasetSplits:
    """Train/valid/test splits with independent seeds, one mask, specs fitted on train."""
    mask_seq, *split_seqs = np.random.SeedSequence(seed).spawn(4)
    mask = random_land_mask(np.random.default_rng(mask_seq), size, size)
    parts = [generate_synthetic(n, size, size, s, mask=mask, exponent=exponent)
             for n, s in zip((n_train, n_valid, n_test), split_seqs)]
    specs = fit_normalization(parts[0])
    return DatasetSplits(*(p.with_channels(specs) for p in parts))


# ---------------------------------------------------------------------------
# FGRD I/O

def save_fgrd(batch: FieldBatch, path) -> None:
    if batch.normalized:
        raise ValueError("FGRD stores data units; denormalize first")
    n, k, h, w = batch.data.shape
    parts = [_HEADER.pack(FGRD_MAGIC, FGRD_VERSION, n, k, h, w)]
    for c in batch.channels:
        flags = int(math.isfinite(c.lower)) | (int(math.isfinite(c.upper)) << 1)
        parts.append(_CHANNEL.pack(flags, c.lower if math.isfinite(c.lower) else 0.0,
                                   c.upper if math.isfinite(c.upper) else 0.0, c.mean, c.std, c.range))
    parts.append(np.ascontiguousarray(batch.mask, dtype=np.uint8).tobytes())
    parts.append(np.ascontiguousarray(batch.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_fgrd(path, names: Sequence[str] | None = None) -> FieldBatch:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FgrdFormatError(f"{path}: truncated header")
    magic, version, n, k, h, w = _HEADER.unpack_from(buf, 0)
    if magic != FGRD_MAGIC:
        raise FgrdFormatError(f"{path}: bad magic {magic!r}")
    if version != FGRD_VERSION:
        raise FgrdFormatError(f"{path}: unsupported version {version}")
    if n * k * h * w > _MAX_ELEMENTS or h * w > _MAX_ELEMENTS:
        raise FgrdFormatError(f"{path}: dimensions overflow ({n}, {k}, {h}, {w})")
    expected = _HEADER.size + k * _CHANNEL.size + h * w + 4 * n * k * h * w
    if len(buf) != expected:
        raise FgrdFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")

    off = _HEADER.size
    if names is None:
        names = [c.name for c in CHANNEL_TEMPLATE] if k == len(CHANNEL_TEMPLATE) else [f"ch{i}" for i in range(k)]
    channels = []
    for i in range(k):
        flags, lo, hi, mean, std, rng_ = _CHANNEL.unpack_from(buf, off)
        off += _CHANNEL.size
        channels.append(ChannelSpec(names[i], lo if flags & 1 else -math.inf, hi if flags & 2 else math.inf,
                                    mean, std, rng_))
    mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
    off += h * w
    data = np.frombuffer(buf, dtype="<f4", count=n * k * h * w, offset=off).reshape(n, k, h, w)
    # canonical form: land is exactly zero
    data = np.where(mask.astype(bool), data, np.float32(0.0)).astype(np.float32)
    return FieldBatch(data, mask, tuple(channels))
