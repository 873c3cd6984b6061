"""PSNR and SSIM on ``3 x H x W`` frames in [0, 1]."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def rgb_to_y(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``3 x H x W`` frame in [0, 1] (studio range, 16/255 offset)."""
    r, g, b = frame[0], frame[1], frame[2]
    return 0.257 * r + 0.504 * g + 0.098 * b + 16.0 / 255.0


def _prepare(a, b, on_y: bool) -> tuple[np.ndarray, np.ndarray]:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ContractError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if on_y:
        return rgb_to_y(a)[None], rgb_to_y(b)[None]
    return a, b


def psnr(a, b, on_y: bool = False) -> float:
    """``10 log10(1 / MSE)``; identical inputs give the 99 dB cap."""
    a, b = _prepare(a, b, on_y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sliding_window_view(img, n, axis=-2) @ g
    return sliding_window_view(rows, n, axis=-1) @ g


def ssim(a, b, on_y: bool = False) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _prepare(a, b, on_y)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ContractError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
