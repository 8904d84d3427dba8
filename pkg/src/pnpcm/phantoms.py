"""Small synthetic test images: smooth background plus a few flat discs."""

from __future__ import annotations

import numpy as np

from .tensor import make_rng


def make_phantom(seed: int, size: int = 64, channels: int = 0) -> np.ndarray:
    """Piecewise-smooth image in [0, 1], ``(size, size)`` or ``(size, size, channels)``."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    planes = []
    for _ in range(max(channels, 1)):
        img = 0.3 + 0.2 * xx * rng.random() + 0.2 * yy * rng.random()
        for _ in range(5):
            cx, cy = rng.random(), rng.random()
            rad = 0.1 + 0.2 * rng.random()
            img += 0.4 * (rng.random() - 0.5) * (((xx - cx) ** 2 + (yy - cy) ** 2) < rad**2)
        planes.append(np.clip(img, 0.0, 1.0))
    if channels:
        return np.stack(planes, axis=2)
    return planes[0]


def make_complex_phantom(seed: int, size: int = 64) -> np.ndarray:
    """Magnitude phantom with a smooth phase, for Fourier-sampling experiments."""
    mag = make_phantom(seed, size)
    yy, xx = np.mgrid[:size, :size] / size
    return mag * np.exp(1j * np.pi * 0.5 * (xx - yy))
