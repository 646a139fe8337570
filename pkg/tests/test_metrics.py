"""PSNR, SSIM and Bjontegaard metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator
from skimage.metrics import structural_similarity

from gofield.errors import DomainError, StructuralError
from gofield.metrics import LUMA, PSNR_CAP, RdPoint, bd_metrics, psnr, ssim


def curve(rates, psnrs):
    return [RdPoint(r, p) for r, p in zip(rates, psnrs)]


# ----------------------------------------------------------------------- PSNR


def test_psnr_identical_is_capped(rng):
    img = rng.random((8, 8, 3))
    assert psnr(img, img) == PSNR_CAP == 99.0


def test_psnr_worked_example():
    a = np.full((4, 4, 3), 128, dtype=np.uint8)
    b = np.zeros((4, 4, 3), dtype=np.uint8)
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / 128**2), abs=1e-12)
    assert psnr(a, b) == pytest.approx(5.99, abs=5e-3)


def test_psnr_scalar_loop_oracle(rng):
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    total = 0.0
    for i in range(6):
        for j in range(5):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    expected = 10 * math.log10(1.0 / (total / 90))
    assert abs(psnr(a, b) - expected) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_psnr_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((5, 4, 3)), r.random((5, 4, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(StructuralError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ----------------------------------------------------------------------- SSIM


def test_ssim_identical_is_one(rng):
    img = rng.random((20, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negative_image_anticorrelated(rng):
    img = 0.5 + 0.4 * (rng.random((24, 24, 3)) - 0.5)
    assert ssim(img, 1.0 - img) < 0


def test_ssim_matches_reference_implementation(rng):
    base = rng.random((32, 40, 3))
    noisy = np.clip(base + 0.1 * rng.standard_normal(base.shape), 0, 1)
    ref = structural_similarity(
        base @ LUMA, noisy @ LUMA, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
    )
    assert abs(ssim(base, noisy) - ref) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((16, 16)), r.random((16, 16))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(DomainError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))
    with pytest.raises(StructuralError):
        ssim(np.zeros((12, 12, 4)), np.zeros((12, 12, 4)))


# ---------------------------------------------------------------- Bjontegaard

RATES = [100.0, 200.0, 400.0, 800.0]
# linear in log10(rate): 2 dB per doubling
LINEAR = [30.0, 32.0, 34.0, 36.0]


def test_bd_identical_curves():
    bd_psnr, bd_rate = bd_metrics(curve(RATES, LINEAR), curve(RATES, LINEAR))
    assert bd_psnr == 0.0 and bd_rate == 0.0


def test_bd_constant_psnr_shift():
    bd_psnr, bd_rate = bd_metrics(curve(RATES, LINEAR), curve(RATES, [p + 1 for p in LINEAR]))
    assert bd_psnr == pytest.approx(1.0, abs=1e-6)
    # on a line of slope 2 dB per doubling, +1 dB is half a doubling: rate x 2**-0.5
    assert bd_rate == pytest.approx((2**-0.5 - 1) * 100, abs=1e-6)


def test_bd_hand_integrated_fixture():
    # curve b spends twice the bytes for the same quality: -2 dB at equal rate, +100 % at equal PSNR
    bd_psnr, bd_rate = bd_metrics(curve(RATES, LINEAR), curve([2 * r for r in RATES], LINEAR))
    assert bd_psnr == pytest.approx(-2.0, abs=1e-9)
    assert bd_rate == pytest.approx(100.0, abs=1e-9)


def test_bd_numeric_integration_oracle():
    # nonlinear curves with a non-constant gap, checked against dense trapezoid integration
    ra, qa = [120.0, 260.0, 500.0, 1100.0], [29.0, 32.5, 34.2, 36.9]
    rb, qb = [90.0, 210.0, 450.0, 900.0], [29.6, 33.4, 35.0, 37.1]
    bd_psnr, bd_rate = bd_metrics(curve(ra, qa), curve(rb, qb))

    def mean_gap(xa, ya, xb, yb):
        lo, hi = max(min(xa), min(xb)), min(max(xa), max(xb))
        t = np.linspace(lo, hi, 400_001)
        fa, fb = PchipInterpolator(xa, ya)(t), PchipInterpolator(xb, yb)(t)
        return np.trapezoid(fb - fa, t) / (hi - lo)

    la, lb = np.log10(ra), np.log10(rb)
    assert bd_psnr == pytest.approx(mean_gap(la, qa, lb, qb), abs=1e-8)
    assert bd_rate == pytest.approx((10 ** mean_gap(qa, la, qb, lb) - 1) * 100, abs=1e-6)
    assert bd_psnr > 0 and bd_rate < 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bd_antisymmetric(seed):
    r = np.random.default_rng(seed)
    rates_a = np.sort(r.uniform(50, 1000, 4))
    rates_b = np.sort(r.uniform(50, 1000, 4))
    pa = np.sort(r.uniform(25, 40, 4))
    pb = np.sort(pa + r.uniform(-1, 1, 4))
    if max(rates_a[0], rates_b[0]) >= min(rates_a[-1], rates_b[-1]) or max(pa[0], pb[0]) >= min(pa[-1], pb[-1]):
        return
    a, b = curve(rates_a, pa), curve(rates_b, pb)
    ab, ba = bd_metrics(a, b), bd_metrics(b, a)
    assert abs(ab[0] + ba[0]) < 1e-9
    # rate ratios invert
    assert (1 + ab[1] / 100) * (1 + ba[1] / 100) == pytest.approx(1.0, abs=1e-9)


def test_bd_errors():
    with pytest.raises(DomainError):
        bd_metrics(curve(RATES[:3], LINEAR[:3]), curve(RATES, LINEAR))
    with pytest.raises(DomainError):
        bd_metrics(curve(RATES, LINEAR), curve([1e4, 2e4, 4e4, 8e4], LINEAR))
    with pytest.raises(DomainError):
        bd_metrics(curve([100, 100, 400, 800], LINEAR), curve(RATES, LINEAR))
    with pytest.raises(DomainError):
        RdPoint(0.0, 30.0)
