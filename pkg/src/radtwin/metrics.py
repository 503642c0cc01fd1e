"""Spectrum quality metrics: NMSE in dB and single-scale SSIM."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

NMSE_FLOOR_DB = -100.0


def nmse_db(pred, truth, floor_db: float = NMSE_FLOOR_DB) -> float:
    """``10 log10(sum((pred - truth)^2) / sum(truth^2))``, floored at ``floor_db``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"nmse: shapes {pred.shape} and {truth.shape} differ")
    energy = np.sum(truth ** 2)
    if energy == 0:
        raise ValueError("nmse undefined for an all-zero reference")
    err = np.sum((pred - truth) ** 2)
    if err == 0:
        return floor_db
    return max(10.0 * np.log10(err / energy), floor_db)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim(pred, truth, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a separable Gaussian window, statistics over valid
    (fully covered) window positions only."""
    x = np.asarray(pred, dtype=float)
    y = np.asarray(truth, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim != 2 or min(x.shape) < win_size:
        raise ValueError(f"ssim needs 2-D images at least {win_size} pixels per side")
    w = gaussian_window(win_size, sigma)

    def blur(img):
        out = correlate1d(img, w, axis=0, mode="reflect")
        return correlate1d(out, w, axis=1, mode="reflect")

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    pad = (win_size - 1) // 2
    return float(smap[pad:-pad, pad:-pad].mean())
