"""Image quality metrics, residual maps and the mean-filter baseline."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .tensor_core import ConfigError

PSNR_CAP = 99.0


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped_psnr(a, b, peak: float = 255.0) -> float:
    return min(psnr(a, b, peak), PSNR_CAP)


def residual_map(a, b) -> np.ndarray:
    """Per-pixel ``|a - b|`` (max over channels) scaled so the largest value is 1."""
    a, b = _same_shape(a, b)
    diff = np.abs(a - b)
    if diff.ndim == 3:
        diff = diff.max(axis=0)
    top = diff.max()
    return diff / top if top > 0 else diff


def mean_filter_defense(image, window: int = 3) -> np.ndarray:
    """Box blur of odd ``window`` with edge replication, per channel."""
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be an odd integer >= 3, got {window}")
    image = np.asarray(image, dtype=np.float64)
    size = (1, window, window) if image.ndim == 3 else window
    return ndimage.uniform_filter(image, size=size, mode="nearest")


class MeanFilterDefense:
    name = "mean_filter"

    def __init__(self, window: int = 3):
        if window < 3 or window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 3, got {window}")
        self.window = window

    def __call__(self, pixels, image_id: int = 0):
        return mean_filter_defense(pixels, self.window)

    def describe(self) -> dict:
        return {"defense": self.name, "window": self.window}


class IdentityDefense:
    name = "none"

    def __call__(self, pixels, image_id: int = 0):
        return np.asarray(pixels, dtype=np.float64)

    def describe(self) -> dict:
        return {"defense": self.name}
