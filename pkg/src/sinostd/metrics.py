"""PSNR / SSIM / NRMSE with the reporting conventions used throughout.

PSNR uses the reference's dynamic range and is capped at 99 dB; SSIM is the
Wang et al. mean local score (11x11 Gaussian window, sigma 1.5) reported as a
percentage; NRMSE is the L2 error relative to the reference norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 99.0
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    nrmse: float
    domain: str = "projection"

    def __post_init__(self):
        if self.domain not in ("projection", "image"):
            raise MetricError(f"unknown metric domain {self.domain!r}")


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(x, "values", x), dtype=np.float64)
    b = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, ref) -> float:
    """10*log10(range^2 / MSE) with range taken from the reference."""
    a, b = _pair(x, ref)
    rng = float(b.max() - b.min())
    if rng == 0.0:
        raise MetricError("reference has zero dynamic range")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(rng * rng / mse))


def _gaussian_window() -> np.ndarray:
    idx = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-(idx ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(x, ref, data_range: float | None = None) -> float:
    """Mean local SSIM as a percentage; dynamic range from ref unless given."""
    a, b = _pair(x, ref)
    if min(a.shape) < 2 * _SSIM_RADIUS + 1:
        raise MetricError(f"ssim needs at least 11x11 grids, got {a.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range == 0.0:
        raise MetricError("reference has zero dynamic range")
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    win = _gaussian_window()

    def smooth(img):
        return ndimage.correlate(img, win, mode="nearest")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a ** 2
    var_b = smooth(b * b) - mu_b ** 2
    cov = smooth(a * b) - mu_a * mu_b
    score = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    r = _SSIM_RADIUS
    return float(score[r:-r, r:-r].mean()) * 100.0


def nrmse(x, ref) -> float:
    """||x - ref||_2 / ||ref||_2."""
    a, b = _pair(x, ref)
    denom = float(np.linalg.norm(b))
    if denom == 0.0:
        raise MetricError("reference has zero norm")
    return float(np.linalg.norm(a - b) / denom)


def metric_report(x, ref, domain: str = "projection") -> MetricReport:
    return MetricReport(psnr=psnr(x, ref), ssim=ssim(x, ref), nrmse=nrmse(x, ref),
                        domain=domain)
