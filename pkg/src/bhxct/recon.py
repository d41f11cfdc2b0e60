"""Filtered backprojection, SIRT, and view subsampling."""

from __future__ import annotations

import logging
import math

import numba
import numpy as np

from bhxct.core import FAN, PARALLEL, Geometry, Image2D, Sinogram
from bhxct.projector import projection_matrix

log = logging.getLogger(__name__)

WINDOWS = ("ramlak", "hann")


def ramp_kernel(num_bins: int, tau: float, window: str = "ramlak") -> np.ndarray:
    """Band-limited ramp kernel sampled at ``n = -(N-1) .. N-1``.

    ``h[0] = 1/(4 tau^2)``, ``h[n] = -1/(pi^2 n^2 tau^2)`` for odd ``n``, zero
    for even ``n``. The Hann variant multiplies the ramp's frequency response by
    ``(1 + cos(pi f / f_max)) / 2``, which in space is ``h/2 + (h[n-1] + h[n+1])/4``.
    """
    if window not in WINDOWS:
        raise ValueError(f"unknown filter window {window!r}; valid options: {', '.join(WINDOWS)}")
    n = np.arange(-(num_bins), num_bins + 1)
    h = np.zeros(n.size)
    h[n == 0] = 1.0 / (4.0 * tau * tau)
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi ** 2 * n[odd].astype(np.float64) ** 2 * tau * tau)
    if window == "hann":
        h = 0.5 * h + 0.25 * (np.roll(h, 1) + np.roll(h, -1))
    # trim the guard samples used by the Hann shift
    return h[1:-1]


def filter_rows(data: np.ndarray, tau: float, window: str = "ramlak") -> np.ndarray:
    """Ramp-filter each detector row by direct convolution, scaled by ``tau``."""
    nb = data.shape[1]
    h = ramp_kernel(nb, tau, window)
    out = np.empty_like(data, dtype=np.float64)
    for v in range(data.shape[0]):
        out[v] = np.convolve(data[v], h, mode="full")[nb - 1: 2 * nb - 1]
    return out * tau


def angular_weights(geometry: Geometry) -> np.ndarray:
    """Per-view integration weights normalised to a half-turn of data.

    Each view gets the mean of its two neighbouring angular gaps (wrapping at
    the period: pi for parallel scans inside ``[0, pi)``, else 2 pi), scaled by
    ``pi / period`` so full-rotation scans count every ray twice at half weight.
    """
    a = geometry.angles
    if geometry.kind == PARALLEL and a[-1] < math.pi:
        period = math.pi
    else:
        period = 2.0 * math.pi
    nxt = np.append(a[1:], a[0] + period)
    prv = np.insert(a[:-1], 0, a[-1] - period)
    return 0.5 * (nxt - prv) * (math.pi / period)


@numba.njit(cache=True)
def _bp_interp(q, cos_t, sin_t, weights, s0, ds, width, height, h, fan, dso, out):
    nv, nb = q.shape
    for v in range(nv):
        c = cos_t[v]
        s = sin_t[v]
        w = weights[v]
        for i in range(height):
            y = ((height - 1) * 0.5 - i) * h
            for j in range(width):
                x = (j - (width - 1) * 0.5) * h
                t = x * c + y * s
                if fan:
                    # u = (-sin, cos); distance from source along the central ray
                    big_u = dso + (-x * s + y * c)
                    pos = dso * t / big_u
                    scale = w * (dso / big_u) ** 2
                else:
                    pos = t
                    scale = w
                k = (pos - s0) / ds
                k0 = int(math.floor(k))
                if k0 < 0 or k0 >= nb - 1:
                    if k0 == nb - 1 and k - k0 == 0.0:
                        out[i, j] += scale * q[v, k0]
                    continue
                f = k - k0
                out[i, j] += scale * ((1.0 - f) * q[v, k0] + f * q[v, k0 + 1])


def fbp(sino: Sinogram, width: int, height: int, pixel_size: float,
        window: str = "ramlak") -> Image2D:
    """Filtered backprojection (parallel beam, or flat-detector fan beam).

    Fan data are rebinned to a virtual detector through the rotation centre,
    cosine pre-weighted, ramp filtered and backprojected with the inverse
    squared distance weight.
    """
    g = sino.geometry
    if g.num_views < 2:
        raise ValueError("fbp needs at least 2 views")
    if window not in WINDOWS:
        raise ValueError(f"unknown filter window {window!r}; valid options: {', '.join(WINDOWS)}")
    s = g.bin_positions()
    tau = g.detector_spacing
    data = sino.data
    dso = 0.0
    if g.kind == FAN:
        dso = float(g.source_to_center)
        mag = dso / g.source_to_detector
        s = s * mag
        tau = tau * mag
        data = data * (dso / np.sqrt(dso * dso + s * s))[None, :]
    q = filter_rows(data, tau, window)
    out = np.zeros((height, width))
    _bp_interp(q, np.cos(g.angles), np.sin(g.angles), angular_weights(g),
               float(s[0]), float(tau), width, height, float(pixel_size), g.kind == FAN, dso, out)
    return Image2D(out, pixel_size)


_matrix_cache: dict = {}


def _operator(geometry: Geometry, width: int, height: int, pixel_size: float):
    key = (repr(geometry.to_dict()), width, height, float(pixel_size))
    A = _matrix_cache.get(key)
    if A is None:
        _matrix_cache.clear()
        A = projection_matrix(geometry, width, height, pixel_size)
        _matrix_cache[key] = A
    return A


def sirt(sino: Sinogram, width: int, height: int, pixel_size: float, iters: int = 200,
         nonneg: bool = True, history: list | None = None) -> Image2D:
    """SIRT from ``x = 0``: ``x <- x + C A^T R (b - A x)``.

    ``R`` and ``C`` hold inverse row and column sums of the projector (zero where
    a ray or pixel is never touched). ``history``, if given, receives the
    residual norm ``||b - A x||`` before each update and after the last one.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    A = _operator(sino.geometry, width, height, pixel_size)
    b = sino.data.ravel()
    if b.size != A.shape[0]:
        raise ValueError("sinogram does not match the projector")
    row = np.asarray(A.sum(axis=1)).ravel()
    col = np.asarray(A.sum(axis=0)).ravel()
    R = np.divide(1.0, row, out=np.zeros_like(row), where=row > 0)
    C = np.divide(1.0, col, out=np.zeros_like(col), where=col > 0)
    x = np.zeros(width * height)
    AT = A.T
    for it in range(iters):
        r = b - A @ x
        if history is not None:
            history.append(float(np.linalg.norm(r)))
        x += C * (AT @ (R * r))
        if nonneg:
            np.maximum(x, 0.0, out=x)
    if history is not None:
        history.append(float(np.linalg.norm(b - A @ x)))
    return Image2D(x.reshape(height, width), pixel_size)


def subsample_views(sino: Sinogram, factor: int) -> Sinogram:
    """Keep views ``0, factor, 2*factor, ...``."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > sino.num_views:
        raise ValueError(f"factor {factor} exceeds the number of views ({sino.num_views})")
    g = sino.geometry
    return Sinogram(sino.data[::factor], g.with_angles(g.angles[::factor]),
                    {**sino.meta, "subsample_factor": factor * sino.meta.get("subsample_factor", 1)})
