"""Evaluation metrics: PSNR and the standard three-factor SSIM.

The evaluation SSIM deliberately differs from the two-factor SSIM used in
the training loss: it includes the covariance (structure) term and uses
Gaussian-weighted sliding windows, so reported numbers are comparable with
the wider literature.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, ParameterError, check_tensor


def psnr(pred, target, max_value=1.0):
    """Peak signal-to-noise ratio in dB; inf when the images are identical."""
    check_tensor(pred, "pred")
    check_tensor(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} != target {target.shape}")
    if max_value <= 0:
        raise ParameterError("max_value must be > 0")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_value * max_value / mse))


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _gaussian_filter_valid(x, kernel):
    k = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nchwuv,uv->nchw", win, kernel, optimize=True)


def ssim_standard(pred, target, window=11, sigma=1.5, dynamic_range=1.0):
    """Mean three-factor SSIM over Gaussian-weighted valid windows.

    Per window: ((2 mx my + C1)(2 cov + C2)) / ((mx^2 + my^2 + C1)
    (vx + vy + C2)), C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    """
    check_tensor(pred, "pred")
    check_tensor(target, "target")
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} != target {target.shape}")
    if window > min(pred.shape[2], pred.shape[3]):
        raise ParameterError(
            f"window {window} exceeds image size {pred.shape[2]}x{pred.shape[3]}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    x = target.astype(np.float64)
    y = pred.astype(np.float64)
    kern = gaussian_kernel(window, sigma)
    mx = _gaussian_filter_valid(x, kern)
    my = _gaussian_filter_valid(y, kern)
    vx = _gaussian_filter_valid(x * x, kern) - mx * mx
    vy = _gaussian_filter_valid(y * y, kern) - my * my
    cov = _gaussian_filter_valid(x * y, kern) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))
