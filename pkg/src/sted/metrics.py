"""Image and disparity metrics. All computed in float64."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0


def _as64(x):
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP, eps: float = 1e-20) -> float:
    a, b = _as64(a), _as64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse <= eps:
        return cap
    return min(10.0 * math.log10(peak ** 2 / mse), cap)


def _gaussian_window(size=11, sigma=1.5):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window over valid positions; channels averaged.

    Accepts (H, W), (C, H, W) or (B, C, H, W).
    """
    a, b = _as64(a), _as64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    while a.dim() < 4:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if min(a.shape[-2:]) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    n, c, h, w = a.shape
    a = a.reshape(n * c, 1, h, w)
    b = b.reshape(n * c, 1, h, w)
    k = _gaussian_window(window, sigma).view(1, 1, window, window)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(x):
        return F.conv2d(x, k)

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float((num / den).mean())


def _masked_abs_error(pred, gt, mask):
    pred, gt = _as64(pred), _as64(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = (pred - gt).abs()
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).bool()
        if mask.shape != err.shape:
            raise ValueError("mask shape mismatch")
        err = err[mask]
    if err.numel() == 0:
        raise ValueError("empty evaluation mask")
    return err


def epe(pred, gt, mask=None) -> float:
    return float(_masked_abs_error(pred, gt, mask).mean())


def bad_pixel_ratio(pred, gt, tau: float, mask=None) -> float:
    """Percentage of pixels whose absolute disparity error exceeds ``tau``."""
    err = _masked_abs_error(pred, gt, mask)
    return 100.0 * float((err > tau).to(torch.float64).mean())
