import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from censored_ldm.autodiff import DTYPE, grad_check
from censored_ldm.distributions import (
    CensoredGaussianParams, censored_nll, censored_nll_elements, censored_pdf, clip_to_bounds, gaussian_nll,
    reconstruction_nll,
)
from oracles import oracle_censored_normalization, oracle_log_phi

INF = math.inf


def t(*v):
    return torch.tensor(v, dtype=DTYPE)


def scalar_params(mu, s, lo, hi, requires_grad=False):
    mu = torch.tensor([mu], dtype=DTYPE, requires_grad=requires_grad)
    log_s = torch.tensor(math.log(s), dtype=DTYPE, requires_grad=requires_grad)
    return CensoredGaussianParams(mu, log_s, torch.tensor(lo, dtype=DTYPE), torch.tensor(hi, dtype=DTYPE))


def test_clip_cases():
    assert clip_to_bounds(t(-0.5), 0.0, 1.0).item() == 0.0
    assert clip_to_bounds(t(0.5), 0.0, 1.0).item() == 0.5
    assert clip_to_bounds(t(1.2), 0.0, 1.0).item() == 1.0
    y = torch.randn(3, 2, 4, 4, dtype=DTYPE)
    once = clip_to_bounds(y, [0.0, -INF], [1.0, 0.5])
    assert torch.equal(clip_to_bounds(once, [0.0, -INF], [1.0, 0.5]), once)
    assert torch.all(once[:, 0] >= 0) and torch.all(once[:, 1] <= 0.5)


def test_gaussian_nll_values():
    assert gaussian_nll(t(0.0), t(0.0), t(0.0)).item() == pytest.approx(0.91893853, abs=1e-8)
    assert gaussian_nll(t(1.0), t(0.0), t(0.0)).item() == pytest.approx(1.41893853, abs=1e-8)
    ref = 0.5 * (1 + math.log(4) + math.log(2 * math.pi))
    assert gaussian_nll(t(2.0), t(0.0), t(math.log(2.0))).item() == pytest.approx(ref, abs=1e-12)
    assert ref == pytest.approx(2.11208571, abs=1e-8)


def test_censored_reference_values():
    assert censored_nll(t(0.0), scalar_params(0.0, 1.0, 0.0, 1.0)).item() == pytest.approx(math.log(2), abs=1e-12)
    val = censored_nll(t(1.0), scalar_params(0.0, 0.5, 0.0, 1.0)).item()
    assert val == pytest.approx(-oracle_log_phi(-2.0).value, abs=1e-12)
    assert val == pytest.approx(3.78318, abs=1e-5)


def test_censored_reduces_to_gaussian_when_unbounded():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 3, 5, 5, generator=g, dtype=DTYPE)
    mu = torch.randn(4, 3, 5, 5, generator=g, dtype=DTYPE)
    log_s = torch.randn(3, generator=g, dtype=DTYPE) * 0.3
    p = CensoredGaussianParams(mu, log_s, t(-INF, -INF, -INF), t(INF, INF, INF))
    assert censored_nll(x, p).item() == gaussian_nll(x, mu, log_s).item()
    far = CensoredGaussianParams(mu, log_s, t(-50, -50, -50) * torch.exp(log_s), t(50, 50, 50) * torch.exp(log_s))
    assert abs(censored_nll(x, far).item() - gaussian_nll(x, mu, log_s).item()) < 1e-9


def test_censored_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        censored_nll(t(-0.1), scalar_params(0.0, 1.0, 0.0, 1.0))


def test_censored_ignores_masked_points():
    x = torch.tensor([[[[0.0, 0.5], [1.0, 0.2]]]], dtype=DTYPE)
    mask = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=DTYPE)
    p = CensoredGaussianParams(torch.full_like(x, 0.3), t(0.1), t(0.0), t(1.0))
    a = censored_nll(x, p, mask)
    x2 = x.clone()
    x2[0, 0, 1, 1] = 7.0  # out of bounds, but masked
    assert censored_nll(x2, p, mask).item() == a.item()


@pytest.mark.parametrize("x,mu,sign", [(0.0, 0.5, +1), (0.0, -0.5, +1), (1.0, 0.5, -1), (0.3, 0.6, +1),
                                       (0.3, 0.1, -1)])
def test_gradient_sign_table(x, mu, sign):
    p = scalar_params(mu, 0.4, 0.0, 1.0, requires_grad=True)
    censored_nll(t(x), p).backward()
    assert math.copysign(1, p.mu.grad.item()) == sign


def test_gradients_on_bound_match_finite_differences():
    g = torch.Generator().manual_seed(3)
    x = torch.rand(2, 2, 8, 8, generator=g, dtype=DTYPE)
    x[x < 0.25] = 0.0
    x[:, 0][x[:, 0] > 0.8] = 1.0
    mu = torch.randn(2, 2, 8, 8, generator=g, dtype=DTYPE) * 0.5 + 0.5
    log_s = t(-0.5, 0.2)
    p = lambda: CensoredGaussianParams(mu, log_s, t(0.0, 0.0), t(1.0, INF))
    rep = grad_check(lambda: censored_nll(x, p()), {"mu": mu, "log_s": log_s}, tolerance=1e-3, max_per_param=60)
    assert rep.passed, rep


def test_censored_pdf_masses():
    p = scalar_params(0.0, 1.0, 0.0, 1.0)
    assert censored_pdf(t(0.0), p).item() == pytest.approx(0.5, abs=1e-15)
    assert censored_pdf(t(-0.1), p).item() == 0.0
    assert censored_pdf(t(1.1), p).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(-2, 0.5), st.floats(0.01, 3))
def test_censored_pdf_normalizes(mu, s, lo, width):
    hi = lo + width
    p = scalar_params(mu, s, lo, hi)
    mass = censored_pdf(t(lo), p).item() + censored_pdf(t(hi), p).item()
    ref = oracle_censored_normalization(mu, s, lo, hi)
    interior = ref.value - float(torch.distributions.Normal(mu, s).cdf(t(lo))) \
        - float(torch.distributions.Normal(-mu, s).cdf(t(-hi)))
    assert abs(ref.value - 1) < 1e-8
    assert abs(mass + interior - 1) < 1e-8


def test_reconstruction_dispatch():
    x = t(0.0, 0.2).reshape(1, 2, 1, 1)
    mu = torch.zeros_like(x)
    assert reconstruction_nll("gaussian", x, mu, t(0, 0), [0, 0], [1, 1]).item() == \
        gaussian_nll(x, mu, t(0, 0)).item()
    with pytest.raises(ValueError):
        reconstruction_nll("laplace", x, mu, t(0, 0), [0, 0], [1, 1])


def test_element_branches():
    x = t(0.0, 0.5, 1.0).reshape(1, 3, 1, 1)
    mu = torch.full_like(x, 0.5)
    p = CensoredGaussianParams(mu, t(0.0, 0.0, 0.0), t(0.0, 0.0, 0.0), t(1.0, 1.0, 1.0))
    el = censored_nll_elements(x, p).ravel()
    assert el[0].item() == pytest.approx(-oracle_log_phi(-0.5).value, rel=1e-13)
    assert el[1].item() == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-13)
    assert el[2].item() == pytest.approx(-oracle_log_phi(-0.5).value, rel=1e-13)
