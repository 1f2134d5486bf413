"""Reference implementations used only by the tests.

Nothing here imports the package: every value is recomputed from the
defining formulas with extended precision, quadrature or explicit loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import integrate

mpmath.mp.dps = 50


@dataclass
class OracleResult:
    value: float
    method: str
    error_bound: float

    def __post_init__(self):
        assert self.error_bound > 0


# ---------------------------------------------------------------------------
# normal distribution

def oracle_log_phi(u: float) -> OracleResult:
    """log Phi(u) at 50 significant digits; rel. error far below 1e-12."""
    if abs(u) > 40:
        raise ValueError("oracle domain is |u| <= 40")
    u = mpmath.mpf(u)
    # upper half: Phi(u) = 1 - Phi(-u) with Phi(-u) tiny, so go through log1p
    val = mpmath.log(mpmath.ncdf(u)) if u <= 0 else mpmath.log1p(-mpmath.ncdf(-u))
    return OracleResult(float(val), "mpmath ncdf, 50 digits", 1e-15 * max(1e-300, abs(float(val))))


def log_phi_asymptotic(u: float, terms: int = 12) -> float:
    """Lower-tail series log Phi(u) ~ log(phi(u)/|u|) + log(sum (-1)^n (2n-1)!! / u^{2n})."""
    u = mpmath.mpf(u)
    s = mpmath.mpf(1)
    term = mpmath.mpf(1)
    for n in range(1, terms):
        term *= -(2 * n - 1) / (u * u)
        s += term
    return float(-u * u / 2 - mpmath.log(-u) - mpmath.log(mpmath.sqrt(2 * mpmath.pi)) + mpmath.log(s))


def oracle_inverse_mills(u: float) -> float:
    u = mpmath.mpf(u)
    return float(mpmath.npdf(u) / mpmath.ncdf(u))


def oracle_censored_normalization(mu: float, s: float, lower: float, upper: float) -> OracleResult:
    """Point masses at finite bounds plus the adaptive-quadrature integral of the interior density."""
    mass_lo = float(mpmath.ncdf((mpmath.mpf(lower) - mu) / s)) if math.isfinite(lower) else 0.0
    mass_hi = float(mpmath.ncdf((mu - mpmath.mpf(upper)) / s)) if math.isfinite(upper) else 0.0
    dens = lambda x: math.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
    # split at the mean so quad sees the peak
    a, b = lower, upper
    pts = [p for p in (a, mu, b) if not math.isinf(p) and a <= p <= b]
    edges = sorted(set(pts))
    if math.isinf(a):
        edges = [-math.inf] + edges
    if math.isinf(b):
        edges = edges + [math.inf]
    total, err = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(dens, lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)
        total += val
        err += e
    return OracleResult(mass_lo + mass_hi + total, "bound masses + adaptive quadrature", max(err, 1e-14))


# ---------------------------------------------------------------------------
# statistics

def two_pass_stats(values: np.ndarray) -> tuple[float, float, float]:
    """(mean, population std, range) with an explicit two-pass loop in Python floats."""
    vals = [float(v) for v in np.ravel(values)]
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var), max(vals) - min(vals)


# ---------------------------------------------------------------------------
# diffusion and sampling

def oracle_alpha_sigma(gamma: float) -> tuple[float, float]:
    g = mpmath.mpf(gamma)
    return float(mpmath.sqrt(1 / (1 + mpmath.exp(-g)))), float(mpmath.sqrt(1 / (1 + mpmath.exp(g))))


def oracle_edm_gamma(n: int, i: int, rho: float = 7.0, gmin: float = -15.0, gmax: float = 15.0) -> float:
    smax = mpmath.exp(-mpmath.mpf(gmin) / 2)
    smin = mpmath.exp(-mpmath.mpf(gmax) / 2)
    r = mpmath.mpf(rho)
    sig = (smax ** (1 / r) + mpmath.mpf(i) / (n - 1) * (smin ** (1 / r) - smax ** (1 / r))) ** r
    return float(-2 * mpmath.log(sig))


def oracle_gaussian_pf_ode(sigma0: float, gamma_start: float, gamma_end: float) -> OracleResult:
    """Ratio z(end) / z(start) of the PF-ODE for N(0, sigma0^2) data.

    Along the ODE z scales with sqrt(alpha^2 sigma0^2 + sigma^2).
    """
    def scale(g):
        g = mpmath.mpf(g)
        a2 = 1 / (1 + mpmath.exp(-g))
        return mpmath.sqrt(a2 * sigma0 ** 2 + (1 - a2))
    return OracleResult(float(scale(gamma_end) / scale(gamma_start)), "closed form", 1e-15)


def oracle_gaussian_denoiser_output(sigma0: float, gamma: float) -> float:
    """Posterior-mean factor D/z = alpha sigma0^2 / (alpha^2 sigma0^2 + sigma^2) at log-SNR gamma."""
    a, s = oracle_alpha_sigma(gamma)
    return a * sigma0 ** 2 / (a * a * sigma0 ** 2 + s * s)


# ---------------------------------------------------------------------------
# metrics by explicit loops

def loop_normalized_rmse(x, y, std, mask) -> float:
    acc, n = 0.0, 0
    N, K, H, W = x.shape
    for a in range(N):
        for k in range(K):
            for i in range(H):
                for j in range(W):
                    if mask[i, j]:
                        acc += ((x[a, k, i, j] - y[a, k, i, j]) / std[k]) ** 2
                        n += 1
    return math.sqrt(acc / n)


def loop_ssim(x, y, rng, mask, window=7, min_valid=4) -> float:
    """Mean SSIM over samples/valid points for one channel [N, H, W]."""
    N, H, W = x.shape
    r = window // 2
    c1, c2 = (0.01 * rng) ** 2, (0.03 * rng) ** 2
    vals = []
    for a in range(N):
        for i in range(H):
            for j in range(W):
                if not mask[i, j]:
                    continue
                xs, ys = [], []
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < H and 0 <= jj < W and mask[ii, jj]:
                            xs.append(x[a, ii, jj])
                            ys.append(y[a, ii, jj])
                if len(xs) < min_valid:
                    continue
                xs, ys = np.array(xs), np.array(ys)
                mx, my = xs.mean(), ys.mean()
                vx, vy = ((xs - mx) ** 2).mean(), ((ys - my) ** 2).mean()
                cxy = ((xs - mx) * (ys - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def loop_faed(fa, fb) -> float:
    fa = np.asarray(fa, dtype=np.float64).reshape(len(fa), -1)
    fb = np.asarray(fb, dtype=np.float64).reshape(len(fb), -1)
    total = 0.0
    for d in range(fa.shape[1]):
        ma, mb = math.fsum(fa[:, d]) / len(fa), math.fsum(fb[:, d]) / len(fb)
        sa = math.sqrt(math.fsum((fa[:, d] - ma) ** 2) / (len(fa) - 1))
        sb = math.sqrt(math.fsum((fb[:, d] - mb) ** 2) / (len(fb) - 1))
        total += (ma - mb) ** 2 + (sa - sb) ** 2
    return total


def loop_coverage(thickness, mask, threshold=0.01) -> dict:
    """Per valid point: fraction of samples with thickness >= threshold."""
    N, H, W = thickness.shape
    return {(i, j): sum(thickness[a, i, j] >= threshold for a in range(N)) / N
            for i in range(H) for j in range(W) if mask[i, j]}


def dft_power(field: np.ndarray) -> np.ndarray:
    """|DFT|^2 / s^4 by the direct double sum (small grids only)."""
    s = field.shape[0]
    f = field - field.mean()
    idx = np.arange(s)
    e = np.exp(-2j * np.pi * np.outer(idx, idx) / s)
    return np.abs(e @ f @ e.T) ** 2 / s ** 4


def adam_scalar(grad_fn, x0: float, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8) -> float:
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x
