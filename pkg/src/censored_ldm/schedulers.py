"""Training and sampling noise schedules.

The adaptive scheduler keeps an EMA of the weighted v-loss in equal-width
log-SNR bins and treats the normalized histogram as an importance-sampling
density p(gamma). Pseudo-time is mapped through its quantile function, running
from gamma_max at tau = 0 down to gamma_min at tau = 1, so -dgamma/dtau = 1/p.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import DTYPE
from .diffusion import GAMMA_MAX, GAMMA_MIN


@dataclass
class AdaptiveScheduler:
    n_bins: int = 100
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX
    decay: float = 0.99
    floor: float = 1e-8
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(self.n_bins)
        self.weights = np.maximum(np.asarray(self.weights, dtype=np.float64), self.floor)
        if self.weights.shape != (self.n_bins,):
            raise ValueError(f"expected {self.n_bins} bin weights, got shape {self.weights.shape}")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.gamma_min, self.gamma_max, self.n_bins + 1)

    @property
    def width(self) -> float:
        return (self.gamma_max - self.gamma_min) / self.n_bins

    def snapshot(self) -> "AdaptiveScheduler":
        return AdaptiveScheduler(self.n_bins, self.gamma_min, self.gamma_max, self.decay, self.floor,
                                 self.weights.copy())

    def bin_index(self, gamma) -> np.ndarray:
        idx = np.floor((np.asarray(gamma, dtype=np.float64) - self.gamma_min) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)

    def density(self, gamma) -> np.ndarray:
        return self.weights[self.bin_index(gamma)] / (self.weights.sum() * self.width)

    def cdf(self, gamma) -> np.ndarray:
        """P(Gamma <= gamma) under the piecewise-constant density."""
        g = np.clip(np.asarray(gamma, dtype=np.float64), self.gamma_min, self.gamma_max)
        probs = self.weights / self.weights.sum()
        below = np.concatenate([[0.0], np.cumsum(probs)])
        j = self.bin_index(g)
        frac = (g - self.edges[j]) / self.width
        return below[j] + frac * probs[j]

    def gamma_of_tau(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """Quantile map tau -> gamma (gamma_max at 0, gamma_min at 1) and the density there."""
        tau = np.clip(np.asarray(tau, dtype=np.float64), 0.0, 1.0)
        if np.all(self.weights == self.weights[0]):
            # flat histogram: the linear schedule, without cumulative-sum rounding
            span = self.gamma_max - self.gamma_min
            return self.gamma_max - span * tau, np.full_like(tau, 1.0 / span)
        # mass accumulated walking down from gamma_max
        probs = (self.weights / self.weights.sum())[::-1]
        above = np.concatenate([[0.0], np.cumsum(probs)])
        above[-1] = 1.0
        r = np.searchsorted(above, tau, side="right") - 1
        r = np.clip(r, 0, self.n_bins - 1)
        # divide by the gap actually stored so that tau = 1 lands on gamma_min exactly
        frac = (tau - above[r]) / (above[r + 1] - above[r])
        frac = np.clip(frac, 0.0, 1.0)
        top = self.gamma_max - r * self.width
        gamma = top - frac * self.width
        j = self.n_bins - 1 - r
        dens = self.weights[j] / (self.weights.sum() * self.width)
        return gamma, dens

    def gamma_and_neg_slope(self, tau) -> tuple[torch.Tensor, torch.Tensor]:
        tau = tau.detach().cpu().numpy() if torch.is_tensor(tau) else tau
        gamma, dens = self.gamma_of_tau(tau)
        return torch.as_tensor(gamma, dtype=DTYPE), torch.as_tensor(1.0 / dens, dtype=DTYPE)

    def update(self, gamma, observed) -> None:
        """EMA update of the bin holding each gamma, one observation at a time."""
        gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
        observed = np.broadcast_to(np.atleast_1d(np.asarray(observed, dtype=np.float64)), gamma.shape)
        if np.any(observed < 0) or not np.all(np.isfinite(observed)):
            raise ValueError("observed losses must be finite and non-negative")
        for j, obs in zip(self.bin_index(gamma), observed):
            self.weights[j] = max(self.decay * self.weights[j] + (1.0 - self.decay) * obs, self.floor)


def adaptive_gamma_of_tau(sched: AdaptiveScheduler, tau):
    return sched.gamma_of_tau(tau)


def adaptive_update(sched: AdaptiveScheduler, gamma, observed_loss) -> AdaptiveScheduler:
    sched.update(gamma, observed_loss)
    return sched


@dataclass(frozen=True)
class EdmSchedule:
    """Karras et al. polynomial sigma grid truncated to [gamma_min, gamma_max].

    sigma here is the noise-to-signal ratio sigma_vp / alpha_vp = exp(-gamma / 2).
    The continuous form uses tau in [0, 1]; tau = 1 is the noisy end.
    """

    n_steps: int = 20
    rho: float = 7.0
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX

    @property
    def sigma_max(self) -> float:
        return math.exp(-self.gamma_min / 2.0)

    @property
    def sigma_min(self) -> float:
        return math.exp(-self.gamma_max / 2.0)

    def _base(self, tau):
        a = self.sigma_max ** (1.0 / self.rho)
        b = self.sigma_min ** (1.0 / self.rho)
        return a + (1.0 - tau) * (b - a), a - b

    def gamma(self, tau):
        base, _ = self._base(tau)
        g = -2.0 * self.rho * np.log(base)
        return np.clip(g, self.gamma_min, self.gamma_max)

    def log1p_exp_neg_gamma_slope(self, tau):
        """d/dtau log(1 + e^-gamma(tau)) = d/dtau log(1 + sigma^2), in closed form."""
        base, span = self._base(tau)
        sigma = base ** self.rho
        dsigma = self.rho * base ** (self.rho - 1.0) * span
        return 2.0 * sigma * dsigma / (1.0 + sigma * sigma)

    def neg_gamma_slope(self, tau):
        base, span = self._base(tau)
        return 2.0 * self.rho * span / base

    def gamma_and_neg_slope(self, tau):
        tau = tau.detach().cpu().numpy() if torch.is_tensor(tau) else np.asarray(tau, dtype=np.float64)
        return (torch.as_tensor(self.gamma(tau), dtype=DTYPE),
                torch.as_tensor(self.neg_gamma_slope(tau), dtype=DTYPE))

    def taus(self) -> np.ndarray:
        """n_steps + 1 integration nodes from tau = 1 down to tau = 0."""
        return np.linspace(1.0, 0.0, self.n_steps + 1)


def edm_gammas(n: int, rho: float = 7.0, gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX) -> np.ndarray:
    """n log-SNR values from gamma_min (i = 0) to gamma_max (i = n - 1)."""
    if n < 1:
        raise ValueError("need at least one step")
    if n == 1:
        return np.array([gamma_min])
    s_max = math.exp(-gamma_min / 2.0)
    s_min = math.exp(-gamma_max / 2.0)
    i = np.arange(n)
    sig = (s_max ** (1 / rho) + i / (n - 1) * (s_min ** (1 / rho) - s_max ** (1 / rho))) ** rho
    g = np.clip(-2.0 * np.log(sig), gamma_min, gamma_max)
    # endpoints exactly, independent of pow/log roundoff
    g[0], g[-1] = gamma_min, gamma_max
    return g
