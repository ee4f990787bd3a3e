import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import diffcloak as dc
from diffcloak.model import AttentionTrace


def test_linear_schedule_default_endpoint_decay():
    # independent oracle: cumulative product of (1 - beta) computed in numpy
    sched = dc.build_linear_schedule(1000, 1e-4, 0.02)
    oracle = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 1000))
    assert oracle[-1] < 1e-3
    assert float(sched.alpha_bars[-1]) == pytest.approx(oracle[-1], rel=1e-5)


def test_linear_schedule_hand_product():
    sched = dc.build_linear_schedule(2, 0.1, 0.1)
    assert sched.alpha_bars.tolist() == pytest.approx([0.9, 0.81], abs=1e-7)


def test_linear_schedule_validation():
    with pytest.raises(ValueError):
        dc.build_linear_schedule(1, 0.1, 0.1)
    with pytest.raises(ValueError):
        dc.build_linear_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        dc.build_linear_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        dc.build_linear_schedule(10, 0.1, 1.0)


@given(st.integers(2, 300),
       st.floats(1e-6, 0.05), st.floats(0.05, 0.5))
@settings(max_examples=40, deadline=None)
def test_schedule_invariants(timesteps, beta_start, beta_end):
    sched = dc.build_linear_schedule(timesteps, beta_start, beta_end)
    abar = sched.alpha_bars.double().numpy()
    assert np.all(np.diff(abar) < 0), "alpha_bar must be strictly decreasing"
    assert np.all((abar > 0) & (abar < 1))
    assert np.all((sched.betas.numpy() > 0) & (sched.betas.numpy() < 1))
    running = np.cumprod(1.0 - np.linspace(beta_start, beta_end, timesteps))
    assert np.allclose(abar, running, atol=1e-6)


def test_q_sample_zero_noise():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    x0 = torch.randn(2, 3, 4, 4)
    out = dc.q_sample(x0, 5, torch.zeros_like(x0), sched)
    assert torch.equal(out, sched.alpha_bars[5].sqrt() * x0)


def test_q_sample_hand_value():
    # T=2 constant-0.1 schedule: abar_1 = 0.81 -> 0.9 * 1 + sqrt(0.19) * 1
    sched = dc.build_linear_schedule(2, 0.1, 0.1)
    x0 = torch.ones(1, 3, 2, 2)
    out = dc.q_sample(x0, 1, torch.ones_like(x0), sched)
    assert torch.allclose(out, torch.full_like(x0, 0.9 + math.sqrt(0.19)), atol=1e-6)


def test_q_sample_iterative_oracle():
    # step-by-step forward chain with eps=0: x_t = sqrt(alpha_t) * x_{t-1}
    sched = dc.build_linear_schedule(40, 5e-3, 0.05)
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    alphas = sched.alphas.double()
    x = x0.clone()
    for t in range(40):
        x = alphas[t].sqrt() * x
    closed = dc.q_sample(x0, 39, torch.zeros_like(x0), sched)
    assert float((x - closed).abs().max()) < 1e-5


def test_q_sample_t_out_of_range():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    x0 = torch.zeros(1, 3, 2, 2)
    with pytest.raises(ValueError):
        dc.q_sample(x0, 10, torch.zeros_like(x0), sched)
    with pytest.raises(ValueError):
        dc.q_sample(x0, -1, torch.zeros_like(x0), sched)


def test_q_sample_per_sample_timesteps():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    x0 = torch.ones(3, 1, 2, 2)
    t = torch.tensor([0, 4, 9])
    out = dc.q_sample(x0, t, torch.zeros_like(x0), sched)
    for i, ti in enumerate(t.tolist()):
        assert torch.allclose(out[i], sched.alpha_bars[ti].sqrt() * x0[i])


def test_q_sample_variance_matches_signal_to_noise():
    sched = dc.build_linear_schedule(100, 1e-3, 0.02)
    t = 60
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(200, 1, 8, 8, generator=gen) * 1.7
    eps = torch.randn(200, 1, 8, 8, generator=gen)
    out = dc.q_sample(x0, t, eps, sched)
    abar = float(sched.alpha_bars[t])
    expected = abar * x0.var().item() + (1 - abar)
    assert out.var().item() == pytest.approx(expected, rel=0.05)


class _MockPredictor:
    """Predicts eps_target + offset regardless of the input."""

    def __init__(self, schedule, target, offset=0.0):
        self.schedule = schedule
        self.target = target
        self.offset = offset

    def predict_noise(self, x_t, t, prompt, **kw):
        return self.target + self.offset, AttentionTrace([])


class _AffinePredictor:
    """Two-parameter mock: prediction = a * x_t + b."""

    def __init__(self, schedule, a, b):
        self.schedule = schedule
        self.a, self.b = a, b

    def predict_noise(self, x_t, t, prompt, **kw):
        return self.a * x_t + self.b, AttentionTrace([])


def test_cond_loss_perfect_predictor():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    eps = torch.randn(2, 3, 4, 4)
    model = _MockPredictor(sched, eps)
    assert float(dc.cond_loss(model, torch.randn(2, 3, 4, 4), None, 3, eps)) == 0.0


def test_cond_loss_constant_offset():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    eps = torch.randn(2, 3, 4, 4)
    model = _MockPredictor(sched, eps, offset=0.3)
    loss = float(dc.cond_loss(model, torch.randn(2, 3, 4, 4), None, 3, eps))
    assert loss == pytest.approx(0.3 ** 2, rel=1e-5)


def test_cond_loss_shape_mismatch():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    eps = torch.randn(2, 3, 4, 4)
    model = _MockPredictor(sched, torch.randn(2, 3, 2, 2))
    with pytest.raises(RuntimeError):
        dc.cond_loss(model, torch.randn(2, 3, 4, 4), None, 3, eps)


def test_cond_loss_gradient_matches_finite_differences():
    sched = dc.build_linear_schedule(10, 0.01, 0.1)
    a = torch.tensor(0.7, dtype=torch.float64)
    b = torch.tensor(-0.2, dtype=torch.float64)
    model = _AffinePredictor(sched, a, b)
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(1, 1, 3, 3, dtype=torch.float64, generator=gen).requires_grad_(True)
    eps = torch.randn(1, 1, 3, 3, dtype=torch.float64, generator=gen)
    loss = dc.cond_loss(model, x0, None, 4, eps)
    grad = torch.autograd.grad(loss, x0)[0]
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 0, 1, 2), (0, 0, 2, 1)]:
        xp, xm = x0.detach().clone(), x0.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (float(dc.cond_loss(model, xp, None, 4, eps))
              - float(dc.cond_loss(model, xm, None, 4, eps))) / (2 * h)
        assert fd == pytest.approx(float(grad[idx]), rel=1e-3, abs=1e-9)
