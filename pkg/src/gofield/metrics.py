"""Image quality and rate-distortion metrics.

Images are float arrays in [0, 1] (uint8 inputs are divided by 255), so the
peak value is 1 and PSNR matches the usual 8-bit definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, StructuralError

PSNR_CAP = 99.0
# ITU-R BT.601 luma weights used for the grayscale conversion in SSIM
LUMA = np.array([0.299, 0.587, 0.114])


def _as_float(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def mse(a, b) -> float:
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise StructuralError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def _gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise StructuralError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the luma images."""
    a, b = _gray(_as_float(a)), _gray(_as_float(b))
    if a.shape != b.shape:
        raise StructuralError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise DomainError(f"image {a.shape} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    pad = (window - 1) // 2

    def blur(x):
        return ndimage.correlate(x, w, mode="reflect")[pad:-pad, pad:-pad]

    c1, c2 = k1**2, k2**2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class RdPoint:
    rate: float  # bytes (or any positive size unit, used consistently)
    psnr: float
    ssim: float | None = None
    label: str = ""

    def __post_init__(self):
        if self.rate <= 0:
            raise DomainError("RD point size must be positive")


def _curve(points: Sequence[RdPoint]) -> tuple[np.ndarray, np.ndarray]:
    if len(points) < 4:
        raise DomainError("BD metrics need at least 4 points per curve")
    rates = np.array([p.rate for p in points], dtype=np.float64)
    quality = np.array([p.psnr for p in points], dtype=np.float64)
    if len(np.unique(rates)) != len(rates):
        raise DomainError("rates within a curve must be distinct")
    return np.log10(rates), quality


def _mean_gap(xa, ya, xb, yb) -> float:
    """Mean of (f_b - f_a) over the overlap of two PCHIP-interpolated curves."""
    lo, hi = max(xa.min(), xb.min()), min(xa.max(), xb.max())
    if hi <= lo:
        raise DomainError("RD curves do not overlap")
    oa, ob = np.argsort(xa), np.argsort(xb)
    fa = PchipInterpolator(xa[oa], ya[oa])
    fb = PchipInterpolator(xb[ob], yb[ob])
    return (fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)


def bd_metrics(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> tuple[float, float]:
    """Bjontegaard deltas of ``curve_b`` relative to ``curve_a``.

    Returns ``(bd_psnr_db, bd_rate_percent)``: the average PSNR gain at equal
    rate and the average rate change at equal PSNR (negative means
    ``curve_b`` needs fewer bits). Both use piecewise-cubic Hermite
    interpolation over log10(rate), integrated exactly over the overlap.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    bd_psnr = _mean_gap(ra, qa, rb, qb)
    if len(np.unique(qa)) != len(qa) or len(np.unique(qb)) != len(qb):
        raise DomainError("PSNR values within a curve must be distinct for BD-rate")
    log_gap = _mean_gap(qa, ra, qb, rb)
    return float(bd_psnr), float((10.0**log_gap - 1.0) * 100.0)
