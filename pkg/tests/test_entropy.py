"""Simulated quantization, learned CDF entropy models and the rate estimate."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gofield.entropy import (
    P_MIN,
    EntropyModel,
    cdf,
    fit_entropy_model,
    pmf,
    rate_loss,
    simulate_quantize,
)
from gofield.errors import StructuralError


class ConstantPmf(EntropyModel):
    """Fixture whose likelihood is the same value everywhere."""

    def __init__(self, channels, value):
        super().__init__(channels, dtype=torch.float64)
        self.value = value

    def _pmf(self, y, channel=None):
        return torch.full_like(y, self.value)


class UniformCdf(EntropyModel):
    """Fixture with the CDF of the uniform distribution on [0, 10]."""

    def __init__(self):
        super().__init__(1, dtype=torch.float64)

    def logits(self, y, channel=None):
        return torch.logit((y / 10).clamp(0, 1))


def perturbed_model(channels=3, seed=0, spread=0.8):
    g = torch.Generator().manual_seed(seed)
    m = EntropyModel(channels, dtype=torch.float64)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * spread)
    return m


def scalar_cdf(model, channel, y):
    """The composed monotone layers evaluated with Python floats."""
    h = [float(y)]
    n = len(model.log_weights)
    for i in range(n):
        w = model.log_weights[i][channel].detach().exp().tolist()
        b = model.biases[i][channel].detach().reshape(-1).tolist()
        h = [sum(w[r][k] * h[k] for k in range(len(h))) + b[r] for r in range(len(w))]
        if i < n - 1:
            gate = model.gates[i][channel].detach().reshape(-1).tolist()
            h = [v + math.tanh(gv) * math.tanh(v) for v, gv in zip(h, gate)]
    return 1 / (1 + math.exp(-h[0]))


class TestSimulateQuantize:
    def test_support(self):
        x = torch.randn(10_000, dtype=torch.float64)
        for q in (1.0, 2.0, 10.0):
            y = simulate_quantize(x, q, torch.Generator().manual_seed(0))
            assert bool(((y - x).abs() <= 0.5 / q + 1e-15).all())

    def test_zero_at_q10(self):
        y = simulate_quantize(torch.zeros(1000), 10.0, torch.Generator().manual_seed(1))
        assert float(y.min()) >= -0.05 and float(y.max()) <= 0.05

    def test_noise_is_unbiased(self):
        q = 10.0
        n = 1_000_000
        x = torch.zeros(n, dtype=torch.float64)
        mean = float((simulate_quantize(x, q, torch.Generator().manual_seed(2)) - x).mean())
        assert abs(mean) <= 3 / (math.sqrt(12 * n) * q)

    def test_reproducible_and_identity_gradient(self):
        x = torch.randn(64, dtype=torch.float64, requires_grad=True)
        a = simulate_quantize(x, 5.0, torch.Generator().manual_seed(3))
        b = simulate_quantize(x, 5.0, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)
        (grad,) = torch.autograd.grad(a.sum(), x)
        assert torch.equal(grad, torch.ones_like(x))

    def test_rejects_nonpositive_q(self):
        with pytest.raises(ValueError):
            simulate_quantize(torch.zeros(2), 0.0)


class TestCdf:
    def test_symmetric_init(self):
        m = EntropyModel(4, dtype=torch.float64)
        for c in range(4):
            assert float(cdf(m, c, 0.0)) == 0.5

    def test_tails(self):
        for seed in range(5):
            m = perturbed_model(seed=seed)
            for c in range(3):
                assert float(cdf(m, c, -1e4)) < 1e-6
                assert float(cdf(m, c, 1e4)) > 1 - 1e-6

    def test_monotone_on_random_pairs(self, rng):
        for seed in range(3):
            m = perturbed_model(seed=seed, spread=1.5)
            for c in range(3):
                a = torch.from_numpy(rng.normal(scale=30, size=10_000))
                b = a + torch.from_numpy(rng.exponential(scale=3, size=10_000))
                assert bool((cdf(m, c, a) <= cdf(m, c, b)).all())

    def test_matches_scalar_evaluation(self, rng):
        m = perturbed_model(seed=9)
        for y in rng.normal(scale=5, size=20):
            for c in range(3):
                assert float(cdf(m, c, y)) == pytest.approx(scalar_cdf(m, c, y), rel=1e-12, abs=1e-15)

    def test_channel_out_of_range(self):
        m = EntropyModel(2)
        with pytest.raises(StructuralError):
            cdf(m, 2, 0.0)
        with pytest.raises(StructuralError):
            pmf(m, -1, 0.0)


class TestPmf:
    def test_uniform_fixture(self):
        assert float(pmf(UniformCdf(), 0, 3.0)) == pytest.approx(0.1, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(0, 200))
    def test_telescoping_bound(self, seed, k):
        m = perturbed_model(seed=seed)
        ks = torch.arange(-k, k + 1, dtype=torch.float64)
        for c in range(3):
            assert float(pmf(m, c, ks).sum()) <= 1 + (2 * k + 1) * P_MIN + 1e-12

    def test_floor(self):
        m = EntropyModel(1, dtype=torch.float64)
        assert float(pmf(m, 0, 1e5)) == P_MIN

    def test_matches_cdf_differencing(self, rng):
        m = perturbed_model(seed=4)
        ys = torch.from_numpy(rng.normal(scale=20, size=500))
        for c in range(3):
            direct = (cdf(m, c, ys + 0.5) - cdf(m, c, ys - 0.5)).clamp_min(P_MIN)
            np.testing.assert_allclose(pmf(m, c, ys).detach().numpy(), direct.detach().numpy(), rtol=0, atol=1e-10)

    def test_floor_passes_gradient_upward(self):
        m = EntropyModel(1, dtype=torch.float64)
        y = torch.tensor([300.0], dtype=torch.float64, requires_grad=True)
        p = pmf(m, 0, y)
        (g,) = torch.autograd.grad(-torch.log2(p).sum(), y)
        assert float(g) > 0  # moving towards the mode increases the likelihood


class TestRateLoss:
    def test_half_probability_fixture(self):
        models = [ConstantPmf(2, 0.5) for _ in range(6)] + [ConstantPmf(12, 0.5)]
        levels = [torch.randn(3, 3, 3, 2, dtype=torch.float64) for _ in range(6)]
        rb, rc = rate_loss(levels, torch.randn(2, 2, 2, 12, dtype=torch.float64), models)
        assert float(rb + rc) == 2.0

    def test_certain_fixture(self):
        models = [ConstantPmf(1, 1.0), ConstantPmf(1, 1.0)]
        rb, rc = rate_loss([torch.randn(2, 2, 2, 1)], torch.randn(2, 2, 2, 1), models)
        assert float(rb + rc) == 0.0

    def test_more_confident_model_costs_less(self):
        vals = [torch.randn(2, 2, 2, 1)]
        low = sum(rate_loss(vals, vals[0], [ConstantPmf(1, 0.3)] * 2))
        high = sum(rate_loss(vals, vals[0], [ConstantPmf(1, 0.6)] * 2))
        assert float(high) < float(low)

    def test_matches_scalar_loop(self, rng):
        models = [perturbed_model(2, seed=s) for s in range(2)] + [perturbed_model(3, seed=7)]
        levels = [torch.from_numpy(rng.normal(scale=4, size=(2, 3, 2, 2))) for _ in range(2)]
        coeff = torch.from_numpy(rng.normal(scale=4, size=(3, 2, 2, 3)))
        rb, rc = rate_loss(levels, coeff, models)

        def bits(model, values):
            total, count = 0.0, 0
            for row in values.reshape(-1, values.shape[-1]).tolist():
                for c, y in enumerate(row):
                    p = max(scalar_cdf(model, c, y + 0.5) - scalar_cdf(model, c, y - 0.5), P_MIN)
                    total -= math.log2(p)
                    count += 1
            return total, count

        b_total = sum(bits(m, v)[0] for m, v in zip(models, levels))
        b_count = sum(v.numel() for v in levels)
        c_total, c_count = bits(models[-1], coeff)
        assert float(rb) == pytest.approx(b_total / b_count, rel=1e-10)
        assert float(rc) == pytest.approx(c_total / c_count, rel=1e-10)

    def test_model_count_mismatch(self):
        with pytest.raises(StructuralError):
            rate_loss([torch.zeros(2, 2, 2, 1)], torch.zeros(2, 2, 2, 1), [EntropyModel(1)])

    def test_channel_mismatch(self):
        with pytest.raises(StructuralError):
            rate_loss([torch.zeros(2, 2, 2, 2)], torch.zeros(2, 2, 2, 1), [EntropyModel(1), EntropyModel(1)])

    def test_parameter_gradients_match_finite_differences(self, rng):
        models = [perturbed_model(2, seed=1), perturbed_model(2, seed=2)]
        levels = [torch.from_numpy(rng.normal(scale=3, size=(2, 2, 2, 2)))]
        coeff = torch.from_numpy(rng.normal(scale=3, size=(2, 2, 2, 2)))
        params = [p for m in models for p in m.parameters()]
        grads = torch.autograd.grad(sum(rate_loss(levels, coeff, models)), params)
        eps = 1e-6
        for p, g in zip(params, grads):
            for i in range(p.numel()):
                old = p.data.view(-1)[i].item()
                vals = []
                for sign in (1, -1):
                    p.data.view(-1)[i] = old + sign * eps
                    with torch.no_grad():
                        vals.append(float(sum(rate_loss(levels, coeff, models))))
                p.data.view(-1)[i] = old
                fd = (vals[0] - vals[1]) / (2 * eps)
                an = float(g.view(-1)[i])
                assert abs(an - fd) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (an, fd)


class TestModelFitting:
    def test_four_symbol_uniform_source(self):
        g = torch.Generator().manual_seed(0)
        samples = torch.randint(0, 4, (20_000, 1), generator=g).to(torch.float32) - 1.0
        m = EntropyModel(1)
        bits = fit_entropy_model(m, samples, steps=800, lr=2e-2, generator=g)
        assert abs(bits - 2.0) <= 0.1

    def test_fit_reduces_rate_on_peaked_source(self):
        g = torch.Generator().manual_seed(1)
        samples = torch.round(torch.randn(5000, 2, generator=g) * 0.7)
        m = EntropyModel(2)
        before = float(m.bits(samples) / samples.numel())
        after = fit_entropy_model(m, samples, steps=300, lr=2e-2, generator=g)
        assert after < before
        entropy = 0.0
        for c in range(2):
            _, counts = np.unique(samples[:, c].numpy(), return_counts=True)
            p = counts / counts.sum()
            entropy += -(p * np.log2(p)).sum() / 2
        assert after >= entropy - 0.01


class TestSerialization:
    def test_roundtrip(self):
        m = perturbed_model(5, seed=3).to(torch.float32)
        blob = m.to_bytes()
        assert len(blob) == m.byte_size()
        back = EntropyModel.from_bytes(blob, 5, dtype=torch.float32)
        for p, q in zip(m.parameters(), back.parameters()):
            assert torch.equal(p, q)
        assert back.to_bytes() == blob

    def test_wrong_length(self):
        with pytest.raises(StructuralError):
            EntropyModel.from_bytes(b"\0" * 8, 1)

    def test_clone_is_independent(self):
        m = EntropyModel(2)
        c = m.clone()
        with torch.no_grad():
            c.biases[0].add_(1.0)
        assert not torch.equal(m.biases[0], c.biases[0])
