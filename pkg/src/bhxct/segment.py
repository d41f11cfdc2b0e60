"""Otsu thresholding and binarisation."""

from __future__ import annotations

import numpy as np

from bhxct.core import Image2D


def _between_class_variance(hist: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Inter-class variance for a split before every bin edge ``1..n-1``."""
    w0 = np.cumsum(hist)[:-1]
    m0 = np.cumsum(hist * centers)[:-1]
    total, mtotal = hist.sum(), (hist * centers).sum()
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = w0 * w1 * (m0 / w0 - (mtotal - m0) / w1) ** 2
    return np.where((w0 > 0) & (w1 > 0), var, -np.inf)


def otsu_threshold(image: Image2D | np.ndarray, num_bins: int = 256) -> float:
    """Threshold maximising the inter-class variance of a ``num_bins`` histogram.

    The histogram spans ``[min, max]`` of the data. The result is the left edge
    of the first bin of the upper class; ties go to the lowest such edge.
    """
    data = np.asarray(getattr(image, "data", image), dtype=np.float64).ravel()
    if num_bins < 2:
        raise ValueError("num_bins must be >= 2")
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise ValueError("cannot threshold a constant image")
    hist, edges = np.histogram(data, bins=num_bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    var = _between_class_variance(hist.astype(np.float64), centers)
    k = int(np.argmax(var))
    return float(edges[k + 1])


def binarize(image: Image2D, threshold: float) -> Image2D:
    return image.replace((image.data > threshold).astype(np.float64))
