"""Image quality metrics, line profiles and a scalar cupping index."""

from __future__ import annotations

import io
import math

import numpy as np
from scipy import ndimage

from bhxct.core import Image2D


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def default_data_range(reference) -> float:
    ref = np.asarray(getattr(reference, "data", reference))
    rng = float(ref.max() - ref.min())
    return rng if rng > 0 else 1.0


def psnr(a, b, data_range: float) -> float:
    """``10 log10(L^2 / MSE)``; identical images give ``math.inf``."""
    x, y = _pair(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(a, b, data_range: float, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over box windows, averaged over the fully covered interior."""
    x, y = _pair(a, b)
    if window % 2 == 0 or window < 1 or window > min(x.shape):
        raise ValueError(f"window must be odd and <= {min(x.shape)}, got {window}")
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    cov_norm = n / (n - 1) if n > 1 else 1.0

    def mean(z):
        return ndimage.uniform_filter(z, size=window, mode="reflect")

    ux, uy = mean(x), mean(y)
    vx = cov_norm * (mean(x * x) - ux * ux)
    vy = cov_norm * (mean(y * y) - uy * uy)
    vxy = cov_norm * (mean(x * y) - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    core = s[pad: s.shape[0] - pad, pad: s.shape[1] - pad]
    return float(core.mean())


def line_profile(image: Image2D, row: int) -> list[tuple[float, float]]:
    if not 0 <= row < image.height:
        raise IndexError(f"row {row} out of range [0, {image.height})")
    x = (np.arange(image.width) - (image.width - 1) / 2.0) * image.pixel_size
    return [(float(xi), float(v)) for xi, v in zip(x, image.data[row])]


def profile_csv(profile) -> str:
    buf = io.StringIO()
    buf.write("x_mm,value\n")
    for x, v in profile:
        buf.write(f"{x!r},{v!r}\n")
    return buf.getvalue()


RIM_INNER = 2.0
RIM_OUTER = 6.0


def cupping_index(image: Image2D, mask: Image2D) -> float:
    """Mean over the rim band divided by mean over the core.

    Distances are Euclidean, in pixels, from each mask pixel to the nearest
    non-mask pixel. The rim band is ``2 < dist <= 6`` (the two outermost
    pixels are skipped as partial-volume dominated), the core is ``dist > 6``.
    A flat object gives 1; cupping gives values above 1.
    """
    x, m = _pair(image, mask)
    inside = m > 0.5
    dist = ndimage.distance_transform_edt(np.pad(inside, 1))[1:-1, 1:-1]
    rim = (dist > RIM_INNER) & (dist <= RIM_OUTER)
    core = dist > RIM_OUTER
    if not rim.any() or not core.any():
        raise ValueError("mask too small: empty rim or core band")
    core_mean = float(x[core].mean())
    if core_mean == 0.0:
        raise ValueError("core mean is zero; cupping index undefined")
    return float(x[rim].mean()) / core_mean
