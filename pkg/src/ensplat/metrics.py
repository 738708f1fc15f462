"""PSNR and SSIM image metrics, plus the analytic SSIM gradient used by the
training loss.

SSIM uses an 11x11 Gaussian window (sigma 1.5) with C1=0.01^2, C2=0.03^2 on
a unit dynamic range. Border windows are renormalized by the in-image mass
(blur(x)/blur(1)), which keeps constant images exactly constant so the
closed forms for constant inputs hold to machine precision.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

C1 = 0.01 ** 2
C2 = 0.03 ** 2
WINDOW = 11
SIGMA = 1.5

PSNR_INF = float("inf")


def _window_kernel():
    half = WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * SIGMA ** 2))
    return k / k.sum()

_KERNEL = _window_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(peak * peak / mse))


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    # per-channel maps; border windows renormalized by in-image mass
    ones = np.ones(x.shape[:2])
    w = _blur(ones)
    w3 = w[:, :, None]
    mx = _blur_channels(x) / w3
    my = _blur_channels(y) / w3
    sxx = _blur_channels(x * x) / w3 - mx * mx
    syy = _blur_channels(y * y) / w3 - my * my
    sxy = _blur_channels(x * y) / w3 - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    return w3, mx, my, sxx, syy, sxy, a1, a2, b1, b2


def _blur_channels(img: np.ndarray) -> np.ndarray:
    return np.stack([_blur(img[:, :, c]) for c in range(img.shape[2])], axis=2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over pixels and channels; symmetric in its arguments."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ShapeError(f"ssim needs images of at least {WINDOW}x{WINDOW}")
    *_, a1, a2, b1, b2 = _ssim_terms(a, b)
    return float((a1 * a2 / (b1 * b2)).mean())


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """(mean SSIM, d meanSSIM / dx) for the rendered image ``x``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    w3, mx, my, sxx, syy, sxy, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    npix = s.size
    # partials of the per-pixel map
    d_mx = (2 * my * a2 / (b1 * b2) - s * 2 * mx / b1)
    d_sxx = -s / b2
    d_sxy = 2 * a1 / (b1 * b2)
    # chain through mu_x = blur(x)/w, s_xx = blur(x^2)/w - mu_x^2,
    # s_xy = blur(xy)/w - mu_x mu_y; adjoint of blur(.)/w is blur(./w).
    t_mu = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = (_blur_channels(t_mu / w3)
            + 2 * x * _blur_channels(d_sxx / w3)
            + y * _blur_channels(d_sxy / w3))
    return float(s.mean()), grad / npix


def l1_with_grad(x: np.ndarray, y: np.ndarray):
    """(mean absolute error, d/dx)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"l1: shapes differ {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size
