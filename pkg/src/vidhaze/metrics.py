"""PSNR and SSIM on [0,1] frames."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    """10*log10(1/MSE) in dB; identical frames report the cap."""
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), standard constants."""
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    truncate = 5.0 / SSIM_SIGMA  # 11x11 support
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = gaussian_filter(x, SSIM_SIGMA, truncate=truncate)
        mu_y = gaussian_filter(y, SSIM_SIGMA, truncate=truncate)
        xx = gaussian_filter(x * x, SSIM_SIGMA, truncate=truncate) - mu_x * mu_x
        yy = gaussian_filter(y * y, SSIM_SIGMA, truncate=truncate) - mu_y * mu_y
        xy = gaussian_filter(x * y, SSIM_SIGMA, truncate=truncate) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
