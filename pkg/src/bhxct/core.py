"""Image/sinogram containers, acquisition geometry and the on-disk format.

Arrays are stored as a JSON header sidecar (``<path>.json``) next to a raw
little-endian float32 payload (``<path>.raw``), row-major.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1

PARALLEL = "parallel"
FAN = "fan"


class FormatError(ValueError):
    """Raised when an array file pair is malformed or inconsistent."""


@dataclass(frozen=True, eq=False)
class Geometry:
    """2D acquisition geometry.

    Detector bin ``k`` sits at ``(k - (num_bins - 1) / 2) * detector_spacing
    + detector_offset`` along the detector axis. For fan beam the detector is
    flat at ``source_to_detector`` from the source and the rotation centre is
    at ``source_to_center``.
    """

    kind: str
    angles: np.ndarray
    num_bins: int
    detector_spacing: float
    detector_offset: float = 0.0
    source_to_center: float | None = None
    source_to_detector: float | None = None

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64).ravel()
        object.__setattr__(self, "angles", angles)
        angles.setflags(write=False)
        if self.kind not in (PARALLEL, FAN):
            raise ValueError(f"geometry kind must be 'parallel' or 'fan', got {self.kind!r}")
        if angles.size == 0:
            raise ValueError("geometry needs at least one view angle")
        if not np.all(np.isfinite(angles)):
            raise ValueError("view angles must be finite")
        if angles[0] < 0.0 or angles[-1] >= 2.0 * math.pi:
            raise ValueError("view angles must lie in [0, 2*pi)")
        if angles.size > 1 and np.any(np.diff(angles) <= 0.0):
            raise ValueError("view angles must be strictly increasing")
        if int(self.num_bins) < 1:
            raise ValueError("num_bins must be >= 1")
        object.__setattr__(self, "num_bins", int(self.num_bins))
        if not self.detector_spacing > 0.0:
            raise ValueError("detector_spacing must be > 0")
        if self.kind == FAN:
            sc, sd = self.source_to_center, self.source_to_detector
            if sc is None or sd is None or not 0.0 < sc < sd:
                raise ValueError("fan geometry requires 0 < source_to_center < source_to_detector")

    @property
    def num_views(self) -> int:
        return self.angles.size

    def bin_positions(self) -> np.ndarray:
        k = np.arange(self.num_bins, dtype=np.float64)
        return (k - (self.num_bins - 1) / 2.0) * self.detector_spacing + self.detector_offset

    def with_angles(self, angles) -> Geometry:
        return Geometry(
            self.kind,
            np.asarray(angles, dtype=np.float64),
            self.num_bins,
            self.detector_spacing,
            self.detector_offset,
            self.source_to_center,
            self.source_to_detector,
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "kind": self.kind,
            "angles": [float(a) for a in self.angles],
            "num_bins": self.num_bins,
            "detector_spacing": float(self.detector_spacing),
            "detector_offset": float(self.detector_offset),
        }
        if self.kind == FAN:
            d["source_to_center"] = float(self.source_to_center)
            d["source_to_detector"] = float(self.source_to_detector)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Geometry:
        return cls(
            kind=d["kind"],
            angles=np.asarray(d["angles"], dtype=np.float64),
            num_bins=int(d["num_bins"]),
            detector_spacing=float(d["detector_spacing"]),
            detector_offset=float(d.get("detector_offset", 0.0)),
            source_to_center=d.get("source_to_center"),
            source_to_detector=d.get("source_to_detector"),
        )

    def same_as(self, other: Geometry) -> bool:
        return self.to_dict() == other.to_dict()


def _uniform_angles(num_views: int, arc: float) -> np.ndarray:
    return np.arange(num_views, dtype=np.float64) * (arc / num_views)


def parallel_geometry(num_views: int, num_bins: int, detector_spacing: float,
                      arc: float = math.pi, detector_offset: float = 0.0) -> Geometry:
    """Equiangular parallel-beam geometry over ``[0, arc)``."""
    return Geometry(PARALLEL, _uniform_angles(num_views, arc), num_bins,
                    detector_spacing, detector_offset)


def fan_geometry(num_views: int, num_bins: int, detector_spacing: float,
                 source_to_center: float, source_to_detector: float,
                 detector_offset: float = 0.0) -> Geometry:
    """Equiangular full-rotation fan-beam geometry with a flat detector."""
    return Geometry(FAN, _uniform_angles(num_views, 2.0 * math.pi), num_bins,
                    detector_spacing, detector_offset, source_to_center, source_to_detector)


def _as_finite_2d(data, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        if arr.size != shape[0] * shape[1]:
            raise ValueError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image2D:
    """Square-pixel image; ``data`` has shape (height, width), row 0 at the top."""

    data: np.ndarray
    pixel_size: float

    def __post_init__(self):
        object.__setattr__(self, "data", _as_finite_2d(self.data))
        if not self.pixel_size > 0.0:
            raise ValueError("pixel_size must be > 0")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def replace(self, data) -> Image2D:
        return Image2D(data, self.pixel_size)

    def congruent(self, other: Image2D) -> bool:
        return self.data.shape == other.data.shape


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Post-log projections, shape (num_views, num_bins)."""

    data: np.ndarray
    geometry: Geometry
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = _as_finite_2d(self.data)
        object.__setattr__(self, "data", data)
        if data.shape != (self.geometry.num_views, self.geometry.num_bins):
            raise ValueError(
                f"sinogram shape {data.shape} does not match geometry "
                f"({self.geometry.num_views} views, {self.geometry.num_bins} bins)")

    @property
    def num_views(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    def replace(self, data, **meta) -> Sinogram:
        return Sinogram(data, self.geometry, {**self.meta, **meta})


@dataclass(frozen=True)
class ArrayHeader:
    kind: str
    shape: tuple[int, ...]
    pixel_size_mm: float | None = None
    geometry: dict | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"version": FORMAT_VERSION, "kind": self.kind, "shape": list(self.shape)}
        if self.pixel_size_mm is not None:
            d["pixel_size_mm"] = self.pixel_size_mm
        if self.geometry is not None:
            d["geometry"] = self.geometry
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArrayHeader:
        # unknown keys are ignored for forward compatibility
        try:
            shape = tuple(int(s) for s in d["shape"])
            kind = str(d["kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed header: {exc}") from exc
        return cls(kind, shape, d.get("pixel_size_mm"), d.get("geometry"))


def _pair(path) -> tuple[Path, Path]:
    p = os.fspath(path)
    for ext in (".json", ".raw"):
        if p.endswith(ext):
            p = p[: -len(ext)]
    return Path(p + ".json"), Path(p + ".raw")


def write_array(path, header: ArrayHeader, data) -> None:
    """Write ``<path>.json`` and ``<path>.raw`` (float32 little-endian)."""
    arr = np.asarray(data)
    n = math.prod(header.shape)
    if arr.size != n:
        raise ValueError(f"header shape {list(header.shape)} needs {n} values, got {arr.size}")
    hdr_path, raw_path = _pair(path)
    raw_path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    hdr_path.write_text(json.dumps(header.to_dict(), indent=1) + "\n")


def read_array(path) -> tuple[ArrayHeader, np.ndarray]:
    """Read a header/raw pair; the payload is returned as float32, shaped."""
    hdr_path, raw_path = _pair(path)
    for p in (hdr_path, raw_path):
        if not p.exists():
            raise FileNotFoundError(f"missing array file: {p}")
    try:
        header = ArrayHeader.from_dict(json.loads(hdr_path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{hdr_path}: invalid JSON header ({exc})") from exc
    raw = raw_path.read_bytes()
    n = math.prod(header.shape)
    if len(raw) != 4 * n:
        raise FormatError(
            f"{raw_path}: length mismatch, header shape {list(header.shape)} needs "
            f"{4 * n} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(header.shape)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(f"{raw_path}: {int(bad.sum())} non-finite values (first at flat index {first})")
    return header, data


def save_image(path, image: Image2D) -> None:
    write_array(path, ArrayHeader("image", image.data.shape, float(image.pixel_size)), image.data)


def load_image(path) -> Image2D:
    header, data = read_array(path)
    if header.kind != "image" or len(header.shape) != 2 or header.pixel_size_mm is None:
        raise FormatError(f"{path}: not an image file (kind={header.kind!r})")
    return Image2D(data.astype(np.float64), float(header.pixel_size_mm))


def save_sinogram(path, sino: Sinogram) -> None:
    write_array(path, ArrayHeader("sinogram", sino.data.shape, None, sino.geometry.to_dict()), sino.data)


def load_sinogram(path) -> Sinogram:
    header, data = read_array(path)
    if header.kind != "sinogram" or header.geometry is None or len(header.shape) != 2:
        raise FormatError(f"{path}: not a sinogram file (kind={header.kind!r})")
    return Sinogram(data.astype(np.float64), Geometry.from_dict(header.geometry))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def export_pgm(image: Image2D, path, window: tuple[float, float]) -> None:
    """Write an 8-bit binary PGM (P5).

    Values are clamped to ``window`` and mapped linearly onto [0, 255], rounding
    half away from zero (so the window midpoint maps to 128).
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"PGM window needs lo < hi, got ({lo}, {hi})")
    scaled = (np.clip(image.data, lo, hi) - lo) / (hi - lo) * 255.0
    pix = _round_half_away(scaled).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def auto_window(image: Image2D) -> tuple[float, float]:
    lo, hi = float(image.data.min()), float(image.data.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)
