import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from censored_ldm.schedulers import AdaptiveScheduler, EdmSchedule, adaptive_gamma_of_tau, adaptive_update, edm_gammas
from oracles import oracle_edm_gamma

# gamma_10 of the 20-node grid, evaluated once at 50 digits and frozen
EDM_20_10 = -6.254438176780643


def test_uniform_quantile():
    s = AdaptiveScheduler()
    tau = np.linspace(0, 1, 1001)
    gamma, dens = adaptive_gamma_of_tau(s, tau)
    assert np.array_equal(gamma, 15 - 30 * tau)
    assert adaptive_gamma_of_tau(s, 0.5)[0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(dens, 1 / 30)


def test_single_bin_histogram():
    w = np.full(100, 1e-8)
    w[50] = 1.0  # covers [0, 0.3)
    s = AdaptiveScheduler(weights=w)
    tau = np.linspace(0.01, 0.99, 50)
    gamma, _ = s.gamma_of_tau(tau)
    inner = (gamma > 0) & (gamma < 0.3)
    assert inner.all()
    slope = np.diff(gamma) / np.diff(tau)
    assert np.allclose(slope, slope[0], rtol=1e-6)


def test_centre_bins_histogram():
    # weight only on the bins touching 0 from both sides: [-0.3, 0) and [0, 0.3)
    w = np.full(100, 1e-12)
    w[49] = w[50] = 1.0
    gamma, _ = AdaptiveScheduler(weights=w).gamma_of_tau(np.linspace(0.001, 0.999, 99))
    assert np.all((gamma > -0.3) & (gamma < 0.3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_endpoints_monotone_and_cdf_inverse(seed):
    rng = np.random.default_rng(seed)
    w = rng.exponential(size=100) * (rng.random(100) < 0.7) + 1e-8
    s = AdaptiveScheduler(weights=w)
    assert s.gamma_of_tau(0.0)[0] == pytest.approx(15.0, abs=1e-12)
    assert s.gamma_of_tau(1.0)[0] == pytest.approx(-15.0, abs=1e-12)
    tau = np.sort(rng.random(200))
    gamma, dens = s.gamma_of_tau(tau)
    assert np.all(np.diff(gamma) <= 0)
    assert np.max(np.abs(s.cdf(gamma) - (1 - tau))) < 1e-9
    assert np.allclose(dens, s.density(gamma - 1e-12))


def test_update_ema():
    s = AdaptiveScheduler(decay=0.99)
    before = s.weights.copy()
    adaptive_update(s, 0.1, 2.0)
    j = s.bin_index(0.1)
    assert s.weights[j] == pytest.approx(1.01, abs=1e-15)
    others = np.delete(np.arange(100), j)
    assert s.weights[others].tobytes() == before[others].tobytes()


def test_update_converges_and_clamps():
    s = AdaptiveScheduler()
    for _ in range(2000):
        s.update(3.3, 0.25)
    assert abs(s.weights[s.bin_index(3.3)] - 0.25) < 1e-6
    s.update(99.0, 5.0)
    s.update(-99.0, 5.0)
    assert s.weights[-1] > 1 and s.weights[0] > 1
    with pytest.raises(ValueError):
        s.update(0.0, -1.0)
    s.update(0.0, 0.0)
    assert s.weights.min() >= s.floor


def test_snapshot_is_independent():
    s = AdaptiveScheduler()
    snap = s.snapshot()
    s.update(0.0, 10.0)
    assert snap.weights.max() == 1.0


def test_edm_gammas():
    g = edm_gammas(20)
    assert g[0] == -15.0 and g[-1] == 15.0
    assert np.all(np.diff(g) > 0)
    assert g[10] == pytest.approx(oracle_edm_gamma(20, 10), abs=1e-12)
    assert g[10] == pytest.approx(EDM_20_10, abs=1e-12)
    assert edm_gammas(1).tolist() == [-15.0]
    with pytest.raises(ValueError):
        edm_gammas(0)


def test_edm_continuous_form():
    e = EdmSchedule()
    assert e.gamma(1.0) == pytest.approx(-15.0, abs=1e-12)
    assert e.gamma(0.0) == pytest.approx(15.0, abs=1e-12)
    nodes = np.linspace(0, 1, 20)
    assert np.allclose(e.gamma(1 - nodes), edm_gammas(20), atol=1e-12)
    # analytic derivatives against central differences of the closed forms
    for tau in (0.1, 0.4, 0.77):
        h = 1e-6
        fd = -(e.gamma(tau + h) - e.gamma(tau - h)) / (2 * h)
        assert e.neg_gamma_slope(tau) == pytest.approx(fd, rel=1e-6)
        L = lambda t_: math.log1p(math.exp(-e.gamma(t_)))
        assert e.log1p_exp_neg_gamma_slope(tau) == pytest.approx((L(tau + h) - L(tau - h)) / (2 * h), rel=1e-6)


def test_edm_slope_at_gamma_zero():
    e = EdmSchedule()
    # gamma = 0 <=> sigma_edm = 1 <=> base = 1
    a, b = e.sigma_max ** (1 / 7), e.sigma_min ** (1 / 7)
    tau0 = 1 - (1 - a) / (b - a)
    assert e.gamma(tau0) == pytest.approx(0.0, abs=1e-12)
    # L' = 2 sigma sigma' / (1 + sigma^2) = sigma' = 7 (a - b) at sigma = 1
    assert e.log1p_exp_neg_gamma_slope(tau0) == pytest.approx(7 * (a - b), rel=1e-12)
