"""Evaluation metrics for reconstructed and generated fields.

All inputs are in data units; land points (mask == 0) never enter any metric.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .grid import ChannelSpec, FieldBatch

SIT_MIN = 0.01


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, FieldBatch) else x, dtype=np.float64)


def _valid(mask, shape) -> np.ndarray:
    return np.ones(shape[-2:], dtype=bool) if mask is None else np.asarray(mask).astype(bool)


@dataclass
class MetricReport:
    rmse: float = math.nan
    ssim: float = math.nan
    acc_sie: float = math.nan
    faed: float = math.nan
    rmse_sie: float = math.nan
    per_channel: dict[str, dict[str, float]] = field(default_factory=dict)
    feature_checkpoint: str = ""

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("all", name, getattr(self, name)) for name in ("rmse", "ssim", "acc_sie", "faed", "rmse_sie")
               if not math.isnan(getattr(self, name))]
        for ch, vals in self.per_channel.items():
            out.extend((ch, k, v) for k, v in vals.items())
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["channel", "metric", "value", "feature_checkpoint"])
            for ch, name, val in self.rows():
                wr.writerow([ch, name, repr(float(val)), self.feature_checkpoint])


# ---------------------------------------------------------------------------
# paired metrics

def normalized_rmse(x, y, specs: Sequence[ChannelSpec], mask=None, per_channel: bool = False):
    """sqrt(mean((x - y)^2 / std_k^2)) over samples, channels and valid points."""
    x, y = _arr(x), _arr(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    valid = _valid(mask, x.shape)
    std = np.array([s.std for s in specs], dtype=np.float64)
    d = ((x - y) / std[None, :, None, None])[:, :, valid]
    if per_channel:
        return np.sqrt((d ** 2).mean(axis=(0, 2)))
    return float(np.sqrt((d ** 2).mean()))


def _box_sum(a: np.ndarray, size: int) -> np.ndarray:
    # windows truncated at the domain edge (zeros outside)
    return uniform_filter(a, size=(1, size, size), mode="constant", cval=0.0) * (size * size)


def ssim_map(x: np.ndarray, y: np.ndarray, rng: float, mask=None, window: int = 7, min_valid: int = 4):
    """Per-point SSIM for [N, H, W] fields; NaN where the window has too few valid points."""
    valid = _valid(mask, x.shape).astype(np.float64)[None]
    m = np.broadcast_to(valid, x.shape)
    n = _box_sum(m, window)
    safe = np.maximum(n, 1.0)
    mx = _box_sum(x * m, window) / safe
    my = _box_sum(y * m, window) / safe
    vx = _box_sum(x * x * m, window) / safe - mx * mx
    vy = _box_sum(y * y * m, window) / safe - my * my
    cxy = _box_sum(x * y * m, window) / safe - mx * my
    c1 = (0.01 * rng) ** 2
    c2 = (0.03 * rng) ** 2
    s = (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    ok = (n >= min_valid - 0.5) & (m > 0)
    return np.where(ok, s, np.nan)


def ssim(x, y, specs: Sequence[ChannelSpec], mask=None, per_channel: bool = False):
    """Mean 7x7-window SSIM over samples, channels and valid points (mask-weighted moments)."""
    x, y = _arr(x), _arr(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    vals = [ssim_map(x[:, k], y[:, k], specs[k].range, mask) for k in range(x.shape[1])]
    if per_channel:
        return np.array([np.nanmean(v) for v in vals])
    return float(np.nanmean(np.stack(vals)))


def ice_extent(thickness: np.ndarray, threshold: float = SIT_MIN) -> np.ndarray:
    return thickness >= threshold


def acc_sie(x, y, mask=None, threshold: float = SIT_MIN, channel: int = 0) -> float:
    """Share of valid points where both fields agree on ice / no ice."""
    x, y = _arr(x), _arr(y)
    valid = _valid(mask, x.shape)
    agree = ice_extent(x[:, channel], threshold) == ice_extent(y[:, channel], threshold)
    return float(agree[:, valid].mean())


# ---------------------------------------------------------------------------
# distribution metrics

def frechet_isotropic(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """||mean_a - mean_b||^2 + ||std_a - std_b||^2 with point-wise statistics over samples."""
    a = np.asarray(feat_a, dtype=np.float64).reshape(len(feat_a), -1)
    b = np.asarray(feat_b, dtype=np.float64).reshape(len(feat_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FAED needs at least two samples per set")
    dm = a.mean(axis=0) - b.mean(axis=0)
    ds = a.std(axis=0, ddof=1) - b.std(axis=0, ddof=1)
    return float(dm @ dm + ds @ ds)


def faed(set_a, set_b, feature_encoder: Callable[[FieldBatch], np.ndarray]) -> float:
    """Frechet distance in the latent space of a separately trained encoder."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("FAED needs at least two samples per set")
    return frechet_isotropic(feature_encoder(set_a), feature_encoder(set_b))


def ice_probability(batch, mask=None, threshold: float = SIT_MIN, channel: int = 0) -> np.ndarray:
    x = _arr(batch)
    if len(x) == 0:
        raise ValueError("empty set")
    return ice_extent(x[:, channel], threshold).mean(axis=0)


def rmse_sie(set_a, set_b, mask=None, threshold: float = SIT_MIN, channel: int = 0) -> float:
    """RMSE between per-point ice-cover frequencies of two sets."""
    pa = ice_probability(set_a, threshold=threshold, channel=channel)
    pb = ice_probability(set_b, threshold=threshold, channel=channel)
    valid = _valid(mask, pa.shape)
    return float(np.sqrt(((pa - pb)[valid] ** 2).mean()))


@dataclass
class ProbabilityCurve:
    bin_lower: np.ndarray
    bin_upper: np.ndarray
    test_mean: np.ndarray
    predicted_mean: np.ndarray
    count: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_lower", "bin_upper", "test_probability", "predicted_probability", "count"])
            for row in zip(self.bin_lower, self.bin_upper, self.test_mean, self.predicted_mean, self.count):
                wr.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])),
                             repr(float(row[3])), int(row[4])])


def sie_probability_curve(test_set, predicted_set, mask=None, threshold: float = SIT_MIN,
                          bin_width: float = 0.05, channel: int = 0) -> ProbabilityCurve:
    """Mean predicted ice probability per test-probability bin; empty bins have count 0 and NaN means."""
    p = ice_probability(test_set, threshold=threshold, channel=channel)
    q = ice_probability(predicted_set, threshold=threshold, channel=channel)
    valid = _valid(mask, p.shape)
    p, q = p[valid], q[valid]
    n_bins = int(round(1.0 / bin_width))
    idx = np.minimum(np.floor(p / bin_width + 1e-12).astype(int), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        tm = np.bincount(idx, weights=p, minlength=n_bins) / count
        pm = np.bincount(idx, weights=q, minlength=n_bins) / count
    lower = np.arange(n_bins) * bin_width
    return ProbabilityCurve(lower, lower + bin_width, tm, pm, count)


# ---------------------------------------------------------------------------
# spectra

@dataclass
class PowerSpectrum:
    wavenumber: np.ndarray
    density: np.ndarray
    count: np.ndarray
    residual_power: float = 0.0

    @property
    def total_power(self) -> float:
        """Binned power plus modes outside the annuli; equals the mean crop variance."""
        return float((self.density * self.count).sum() + self.residual_power)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["wavenumber", "density", "count"])
            for k, d, c in zip(self.wavenumber, self.density, self.count):
                wr.writerow([int(k), repr(float(d)), int(c)])


def radial_psd(batch, channel: int = 0, crop: tuple[int, int, int] | None = None, mask=None) -> PowerSpectrum:
    """Radially averaged power spectrum of a square crop (row, col, size).

    Each sample has its crop mean removed; |FFT|^2 / size^4 is averaged over
    the modes of each integer wavenumber annulus k = 1..size//2 and over
    samples. Corner modes beyond the last annulus are kept in
    ``residual_power`` so that the total matches the crop variance.
    """
    if isinstance(batch, FieldBatch):
        mask = batch.mask if mask is None else mask
    x = _arr(batch)[:, channel]
    if crop is None:
        s = min(x.shape[-2:])
        crop = (0, 0, s)
    r0, c0, s = crop
    if s < 2 or r0 < 0 or c0 < 0 or r0 + s > x.shape[-2] or c0 + s > x.shape[-1]:
        raise ValueError(f"crop {crop} outside grid {x.shape[-2:]}")
    if mask is not None and not np.asarray(mask)[r0:r0 + s, c0:c0 + s].all():
        raise ValueError(f"crop {crop} intersects land")
    sub = x[:, r0:r0 + s, c0:c0 + s]
    sub = sub - sub.mean(axis=(1, 2), keepdims=True)
    power = (np.abs(np.fft.fft2(sub)) ** 2).mean(axis=0) / float(s) ** 4
    k = np.fft.fftfreq(s) * s
    radius = np.hypot(k[:, None], k[None, :])
    idx = np.floor(radius + 0.5).astype(int)
    n_bins = s // 2
    inside = (idx >= 1) & (idx <= n_bins)
    count = np.bincount(idx[inside] - 1, minlength=n_bins)
    total = np.bincount(idx[inside] - 1, weights=power[inside], minlength=n_bins)
    density = np.divide(total, count, out=np.zeros(n_bins), where=count > 0)
    return PowerSpectrum(np.arange(1, n_bins + 1), density, count, float(power[~inside].sum()))


def report(paired: bool, ref: FieldBatch, other: FieldBatch,
           feature_encoder: Callable[[FieldBatch], np.ndarray] | None = None,
           feature_checkpoint: str = "", threshold: float = SIT_MIN) -> MetricReport:
    """Paired: RMSE, SSIM, ACC_SIE (one-to-one). Unpaired: FAED, RMSE_SIE."""
    if ref.channels != other.channels:
        raise ValueError("channel specs differ between reference and compared set")
    rep = MetricReport(feature_checkpoint=feature_checkpoint)
    mask = ref.mask
    names = [c.name for c in ref.channels]
    if paired:
        if ref.shape != other.shape:
            raise ValueError("paired evaluation needs equally sized sets")
        rep.rmse = normalized_rmse(ref, other, ref.channels, mask)
        rep.ssim = ssim(ref, other, ref.channels, mask)
        rep.acc_sie = acc_sie(ref, other, mask, threshold)
        r_ch = normalized_rmse(ref, other, ref.channels, mask, per_channel=True)
        s_ch = ssim(ref, other, ref.channels, mask, per_channel=True)
        rep.per_channel = {n: {"rmse": float(a), "ssim": float(b)} for n, a, b in zip(names, r_ch, s_ch)}
    else:
        if feature_encoder is not None:
            rep.faed = faed(ref, other, feature_encoder)
        rep.rmse_sie = rmse_sie(ref, other, mask, threshold)
    return rep
