"""Image quality metrics: PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import COMPLEX, ShapeError

PSNR_CAP = 99.0


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    mse: float


def magnitude(x: np.ndarray) -> np.ndarray:
    """Elementwise modulus of a complex tensor."""
    if x.dtype != COMPLEX:
        raise TypeError(f"magnitude expects complex128 input, got {x.dtype}")
    return np.abs(x)


def _real_pair(x, ref):
    if x.shape != ref.shape:
        raise ShapeError(f"shape {x.shape} != {ref.shape}")
    if np.iscomplexobj(x) or np.iscomplexobj(ref):
        x = np.abs(x)
        ref = np.abs(ref)
    return np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)


def default_peak(ref: np.ndarray) -> float:
    """1.0 for real images in [0, 1]; ``max |ref|`` for complex (MRI) images."""
    if np.iscomplexobj(ref):
        return float(np.max(np.abs(ref)))
    return 1.0


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x, ref = _real_pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB, capped at :data:`PSNR_CAP`."""
    if peak is None:
        peak = default_peak(ref)
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(x, ref)
    if err == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak**2 / err), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - (size - 1) / 2.0) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    views = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", views, win)


def _ssim_2d(x, ref, params: SsimParams, win):
    c1 = (params.k1 * params.peak) ** 2
    c2 = (params.k2 * params.peak) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(ref, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(ref * ref, win) - mu_y * mu_y
    sxy = _filter_valid(x * ref, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, ref: np.ndarray, params: Optional[SsimParams] = None) -> float:
    """Mean local SSIM with a Gaussian window over the valid region.

    Complex inputs are compared by magnitude; ``(H, W, C)`` inputs average
    the per-channel scores.
    """
    if params is None:
        params = SsimParams(peak=default_peak(ref))
    x, ref = _real_pair(x, ref)
    if x.ndim not in (2, 3):
        raise ShapeError(f"ssim expects a 2D or 3D image, got ndim={x.ndim}")
    if min(x.shape[:2]) < params.window_size:
        raise ShapeError(f"image {x.shape[:2]} smaller than the {params.window_size}px window")
    win = gaussian_window(params.window_size, params.sigma)
    if x.ndim == 2:
        return _ssim_2d(x, ref, params, win)
    return float(np.mean([_ssim_2d(x[:, :, c], ref[:, :, c], params, win) for c in range(x.shape[2])]))


def evaluate(x: np.ndarray, ref: np.ndarray, peak: Optional[float] = None) -> MetricReport:
    if peak is None:
        peak = default_peak(ref)
    return MetricReport(psnr(x, ref, peak), ssim(x, ref, SsimParams(peak=peak)), mse(x, ref))
