import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from censored_ldm.autodiff import (
    DTYPE, CheckpointError, NonFiniteGradientError, OptimizerState, adam_step, config_fingerprint, grad_check,
    load_checkpoint, log_std_normal_cdf, lr_at, save_checkpoint,
)
from oracles import adam_scalar, log_phi_asymptotic, oracle_inverse_mills, oracle_log_phi


def _grad(f, x0):
    x = torch.tensor(x0, dtype=DTYPE, requires_grad=True)
    f(x).backward()
    return x.grad.item()


def test_basic_derivatives():
    assert _grad(lambda x: x * x, 3.0) == 6.0
    assert _grad(torch.exp, 0.0) == 1.0


@pytest.mark.parametrize("name,fn", [
    ("exp", torch.exp), ("tanh", torch.tanh), ("erf", torch.erf), ("gelu", F.gelu),
    ("log", lambda x: torch.log(x.abs() + 0.5)), ("relu", lambda x: F.relu(x + 0.05)),
    ("sum", lambda x: (x * x).sum(dim=0)), ("mean", lambda x: x.mean(dim=1)),
    ("reshape", lambda x: x.reshape(-1)[::2] * x.reshape(-1)[1::2]),
    ("concat", lambda x: torch.cat([x, 2 * x], dim=1) ** 2),
    ("upsample", lambda x: F.interpolate(x[None, None], scale_factor=2, mode="nearest") ** 3),
    ("matmul", lambda x: x @ x.T),
])
def test_primitive_gradients(name, fn):
    torch.manual_seed(0)
    x = (torch.rand(4, 4, dtype=DTYPE) * 4 - 2)
    rep = grad_check(lambda: (fn(x) * torch.linspace(0.5, 1.5, fn(x).numel()).reshape(fn(x).shape)).sum(),
                     {name: x}, step=1e-3, tolerance=1e-4)
    assert rep.passed, rep


def test_conv2d_gradient_and_downsample():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 1, 5, 5, generator=g, dtype=DTYPE) * 4 - 2
    w = torch.rand(2, 1, 3, 3, generator=g, dtype=DTYPE) * 4 - 2
    rep = grad_check(lambda: (F.conv2d(x, w, padding=1) ** 2).sum(), {"x": x, "w": w}, tolerance=1e-4)
    assert rep.passed, rep
    x6 = torch.rand(1, 1, 6, 6, generator=g, dtype=DTYPE)
    w2 = torch.rand(1, 1, 2, 2, generator=g, dtype=DTYPE)
    rep = grad_check(lambda: (F.conv2d(x6, w2, stride=2) ** 2).sum(), {"x": x6, "w": w2}, tolerance=1e-4)
    assert rep.passed, rep


def test_backward_deterministic():
    x = torch.linspace(-2, 2, 10, dtype=DTYPE, requires_grad=True)
    grads = []
    for _ in range(2):
        x.grad = None
        (torch.tanh(x) * log_std_normal_cdf(x)).sum().backward()
        grads.append(x.grad.clone())
    assert torch.equal(*grads)


def test_log_phi_values():
    assert log_std_normal_cdf(0.0).item() == pytest.approx(math.log(0.5), abs=1e-15)
    assert log_std_normal_cdf(-10.0).item() == pytest.approx(-53.2312852, abs=1e-7)
    assert log_std_normal_cdf(10.0).item() == pytest.approx(-7.6199e-24, rel=1e-4)


@pytest.mark.parametrize("u", [-40.0, -38.0, -30.0, -10.0, -6.5, -6.0, -5.99, -3.0, -0.5, 0.0, 0.5, 3.0, 8.0, 10.0,
                               20.0])
def test_log_phi_against_oracle(u):
    ref = oracle_log_phi(u).value
    got = log_std_normal_cdf(u).item()
    assert math.isfinite(got)
    assert abs(got - ref) <= 1e-13 * abs(ref) + 1e-300
    x = torch.tensor(u, dtype=DTYPE, requires_grad=True)
    log_std_normal_cdf(x).backward()
    assert x.grad.item() == pytest.approx(oracle_inverse_mills(u), rel=1e-12)


def test_log_phi_asymptotic_series_consistent():
    assert oracle_log_phi(-30.0).value == pytest.approx(log_phi_asymptotic(-30.0), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-40, 40), st.floats(-40, 40))
def test_log_phi_monotone_nonpositive(a, b):
    lo, hi = sorted((a, b))
    v = log_std_normal_cdf(torch.tensor([lo, hi], dtype=DTYPE))
    assert v[0] <= v[1] <= 0


def test_adam_zero_grad_is_noop():
    p = {"w": torch.tensor([1.0, -2.0], dtype=DTYPE)}
    adam_step(p, {"w": torch.zeros(2, dtype=DTYPE)}, OptimizerState(), lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_is_sign():
    p = {"w": torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE)}
    adam_step(p, {"w": torch.tensor([3.0, -0.2, 1e-3], dtype=DTYPE)}, OptimizerState(), lr=0.01)
    assert p["w"].tolist() == pytest.approx([0.99, 1.01, 0.99], abs=1e-7)


def test_adam_quadratic_matches_scalar_oracle():
    x = torch.tensor([1.0], dtype=DTYPE)
    state = OptimizerState()
    for _ in range(100):
        adam_step({"x": x}, {"x": 2 * x}, state, lr=0.1)
    assert abs(x.item()) < 0.05
    assert x.item() == pytest.approx(adam_scalar(lambda v: 2 * v, 1.0, 0.1, 100), abs=1e-12)


def test_adam_non_finite_names_parameter():
    with pytest.raises(NonFiniteGradientError, match="bias"):
        adam_step({"bias": torch.zeros(1, dtype=DTYPE)}, {"bias": torch.tensor([math.nan], dtype=DTYPE)},
                  OptimizerState(), 0.1)


def test_lr_schedule():
    assert lr_at(0, 10, 100, 1e-6, 1e-3) == 1e-6
    assert lr_at(10, 10, 100, 1e-6, 1e-3) == 1e-3
    assert lr_at(55, 10, 100, 0.0, 1e-3) == pytest.approx(0.5e-3, rel=1e-12)
    assert lr_at(100, 10, 100, 1e-6, 1e-3) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        lr_at(0, 20, 10, 0, 1)
    with pytest.raises(ValueError):
        lr_at(11, 0, 10, 0, 1)


def test_grad_check_quadratic():
    a = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE)
    rep = grad_check(lambda: (a * a).sum() * 0.5, [a])
    assert rep.max_rel_error < 1e-8


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g

    a = torch.tensor([1.5], dtype=DTYPE)
    assert not grad_check(lambda: Bad.apply(a).sum(), [a]).passed


def test_checkpoint_roundtrip(tmp_path):
    t = {"a": torch.arange(6, dtype=DTYPE).reshape(2, 3), "s": torch.tensor(1.5, dtype=DTYPE)}
    cfg = {"width": 8, "name": "x"}
    fp = save_checkpoint(tmp_path / "c.ckpt", t, cfg)
    assert fp == config_fingerprint(cfg)
    back, cfg2, fp2 = load_checkpoint(tmp_path / "c.ckpt", expect_fingerprint=fp)
    assert cfg2 == cfg and fp2 == fp
    assert torch.equal(back["a"], t["a"]) and back["s"].item() == 1.5
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "c.ckpt", expect_fingerprint="0" * 16)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")
