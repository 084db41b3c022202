"""Multi-scale structural similarity (Gaussian window 11, sigma 1.5, valid filtering)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def num_scales(size: int, max_scales: int = len(SCALE_WEIGHTS)) -> int:
    """Largest S <= max_scales such that size >= 2^(S-1) * 11."""
    if size < WIN_SIZE:
        raise ValueError(f"MS-SSIM needs images of at least {WIN_SIZE} pixels per side, got {size}")
    s = 1
    while s < max_scales and size >= (2 ** s) * WIN_SIZE:
        s += 1
    return s


def scale_weights(scales: int) -> torch.Tensor:
    w = torch.tensor(SCALE_WEIGHTS[:scales], dtype=torch.float64)
    return w / w.sum()


def _gaussian_1d(dtype, device) -> torch.Tensor:
    x = torch.arange(WIN_SIZE, dtype=torch.float64) - WIN_SIZE // 2
    g = torch.exp(-(x**2) / (2 * WIN_SIGMA**2))
    return (g / g.sum()).to(dtype=dtype, device=device)


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def ssim_components(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0):
    """Mean SSIM and mean contrast-structure term per (sample, channel)."""
    g = _gaussian_1d(x.dtype, x.device)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mu_x**2
    syy = _filter(y * y, g) - mu_y**2
    sxy = _filter(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).mean(dim=(2, 3)), cs.mean(dim=(2, 3))


def _pow_nonneg(x: torch.Tensor, w) -> torch.Tensor:
    # max(x, 0) ** w without a NaN gradient at x <= 0
    pos = x > 0
    return torch.where(pos, x.clamp(min=1e-12) ** w, torch.zeros_like(x))


def ms_ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, max_scales: int = 5) -> torch.Tensor:
    """MS-SSIM of (N, C, H, W) batches, averaged over channels; returns shape (N,).

    The number of scales drops below five for small images and the standard
    scale weights are renormalized over the scales that remain.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    scales = num_scales(min(x.shape[-2:]), max_scales)
    weights = scale_weights(scales).to(x.dtype)
    value = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
    for i in range(scales):
        ssim, cs = ssim_components(x, y, data_range)
        if i < scales - 1:
            value = value * _pow_nonneg(cs, weights[i])
            pad = [s % 2 for s in x.shape[-2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
        else:
            value = value * _pow_nonneg(ssim, weights[i])
    return value.mean(dim=1)


def ms_ssim_maps(a: np.ndarray, b: np.ndarray) -> float:
    """MS-SSIM of two H x W (x C) arrays with values in [0, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    ta = torch.from_numpy(a.transpose(2, 0, 1).copy())[None]
    tb = torch.from_numpy(b.transpose(2, 0, 1).copy())[None]
    return float(ms_ssim(ta, tb)[0])
