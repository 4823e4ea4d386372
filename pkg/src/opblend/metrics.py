"""Training loss and evaluation metrics.

The training loss combines a mean absolute error with a structural
similarity penalty: ``MAE + phi * (1 - ssim)``, so minimizing the loss
drives the structural similarity up. SSIM uses Gaussian-weighted local
statistics over valid window positions (no padding), the standard
published construction.

Scalar metrics (psnr, ssim_db, total_variation) are plain float
computations; ``ssim_map`` and ``smoothing_loss`` run on tensors and are
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    absval,
    add,
    affine,
    conv2d,
    mean_all,
    mul,
    reciprocal,
)

__all__ = [
    "LossConfig",
    "DB_CAP",
    "gaussian_window",
    "ssim_map",
    "ssim",
    "ssim_db",
    "psnr",
    "smoothing_loss",
    "total_variation",
]

DB_CAP = 120.0


@dataclass(frozen=True)
class LossConfig:
    """Trade-off weight and SSIM parameters for the training loss."""

    phi: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError(f"phi must be nonnegative, got {self.phi}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.ssim_sigma <= 0 or self.dynamic_range <= 0:
            raise ValueError("ssim_sigma and dynamic_range must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window (float64)."""
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _window_kernel(channels: int, cfg: LossConfig, dtype) -> Tensor:
    # depthwise filtering expressed as a block-diagonal conv2d kernel
    win = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    k = np.zeros((channels, channels, cfg.ssim_window, cfg.ssim_window), dtype=dtype)
    for c in range(channels):
        k[c, c] = win
    return Tensor(k)


def ssim_map(x: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Per-pixel structural similarity over valid window positions.

    Inputs must share shapes and be at least one window wide. The map has
    spatial extents reduced by window-1; its mean is the scalar similarity.
    Differentiable when the inputs are on a tape.
    """
    cfg = cfg or LossConfig()
    if x.shape != y.shape:
        raise ShapeError(f"ssim_map: shapes {x.shape} and {y.shape} differ")
    _, c, h, w = x.shape
    if h < cfg.ssim_window or w < cfg.ssim_window:
        raise ShapeError(
            f"ssim_map: image {h}x{w} smaller than the {cfg.ssim_window}-pixel window"
        )
    kern = _window_kernel(c, cfg, x.dtype)
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2

    mu_x = conv2d(x, kern)
    mu_y = conv2d(y, kern)
    mu_xx = mul(mu_x, mu_x)
    mu_yy = mul(mu_y, mu_y)
    mu_xy = mul(mu_x, mu_y)
    var_x = add(conv2d(mul(x, x), kern), affine(mu_xx, -1.0))
    var_y = add(conv2d(mul(y, y), kern), affine(mu_yy, -1.0))
    cov = add(conv2d(mul(x, y), kern), affine(mu_xy, -1.0))

    num = mul(affine(mu_xy, 2.0, c1), affine(cov, 2.0, c2))
    den = mul(affine(add(mu_xx, mu_yy), 1.0, c1), affine(add(var_x, var_y), 1.0, c2))
    return mul(num, reciprocal(den))


def ssim(x, y, cfg: LossConfig | None = None) -> float:
    """Scalar structural similarity: mean of the per-pixel map."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    yt = y if isinstance(y, Tensor) else Tensor(np.asarray(y))
    return float(ssim_map(xt, yt, cfg).data.mean())


def ssim_db(s: float) -> float:
    """Similarity on a decibel scale: -10*log10(1 - s), capped at 120 dB."""
    if s >= 1.0 - 1e-12:
        return DB_CAP
    return min(DB_CAP, -10.0 * np.log10(1.0 - s))


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; a zero-MSE match reports the 120 dB cap."""
    xa = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ya = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ShapeError(f"psnr: shapes {xa.shape} and {ya.shape} differ")
    mse = float(np.mean((xa - ya) ** 2))
    if mse == 0.0:
        return DB_CAP
    return min(DB_CAP, 10.0 * np.log10(peak * peak / mse))


def smoothing_loss(pred: Tensor, label: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Differentiable training loss: mean |label - pred| + phi * (1 - ssim).

    Zero exactly when pred equals label; with phi = 0 it is the mean
    absolute error and no window-size constraint applies.
    """
    cfg = cfg or LossConfig()
    if pred.shape != label.shape:
        raise ShapeError(f"smoothing_loss: shapes {pred.shape} and {label.shape} differ")
    l1 = mean_all(absval(add(label, affine(pred, -1.0))))
    if cfg.phi == 0:
        return l1
    sim = mean_all(ssim_map(pred, label, cfg))
    return add(l1, affine(sim, -cfg.phi, cfg.phi))


def total_variation(x) -> float:
    """Mean absolute neighboring-pixel difference (horizontal + vertical).

    Accepts a 4-D tensor/array or an (H, W) / (H, W, C) image array; the sum
    of both difference fields is normalized by the pixel count.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)[None]
    elif arr.ndim != 4:
        raise ShapeError(f"total_variation: expected 2-D, 3-D or 4-D input, got {arr.shape}")
    dh = np.abs(np.diff(arr, axis=3)).sum()
    dv = np.abs(np.diff(arr, axis=2)).sum()
    return float((dh + dv) / arr.size)
