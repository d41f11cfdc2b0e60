"""Synthetic single-material phantoms: a disk base with fins, rods, notches and pores.

Phantoms are support maps in [0, 1]; boundary pixels carry their covered area
fraction, estimated on a regular sub-pixel grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from bhxct.core import Image2D

FEATURES = ("fins", "rods", "notches")
SUPERSAMPLE = 8


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 256
    pixel_size: float = 0.08
    base_radius: float = 7.5
    mu_material: float = 0.2
    num_pores: int = 0
    pore_radius_range: tuple[float, float] = (0.2, 0.5)
    feature_set: tuple[str, ...] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pore_radius_range", tuple(float(r) for r in self.pore_radius_range))
        object.__setattr__(self, "feature_set", tuple(self.feature_set))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 1:
            raise ValueError("image_size: must be >= 1")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size: must be > 0")
        half = self.image_size * self.pixel_size / 2.0
        if not 0.0 <= self.base_radius < half:
            raise ValueError(f"base_radius: must lie in [0, {half:g}) mm, got {self.base_radius}")
        if self.num_pores < 0:
            raise ValueError("num_pores: must be >= 0")
        lo, hi = self.pore_radius_range
        if self.num_pores and not (0.0 < lo <= hi < self.base_radius / 4.0):
            raise ValueError(
                f"pore_radius_range: need 0 < lo <= hi < base_radius/4 = {self.base_radius / 4:g}")
        unknown = set(self.feature_set) - set(FEATURES)
        if unknown:
            raise ValueError(f"feature_set: unknown features {sorted(unknown)}; valid: {list(FEATURES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pore_radius_range"] = list(self.pore_radius_range)
        d["feature_set"] = list(self.feature_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _subsample_coords(spec: PhantomSpec, rows: slice):
    n, h, s = spec.image_size, spec.pixel_size, SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s - 0.5
    cols = (np.arange(n)[:, None] + offs[None, :]).ravel()
    rr = (np.arange(n)[rows][:, None] + offs[None, :]).ravel()
    x = (cols - (n - 1) / 2.0) * h
    y = ((n - 1) / 2.0 - rr) * h
    return np.meshgrid(x, y)


def _rasterize(spec: PhantomSpec, inside) -> np.ndarray:
    """Area coverage of the region ``inside(x, y) -> bool array``."""
    n, s = spec.image_size, SUPERSAMPLE
    out = np.empty((n, n))
    step = 32
    for r0 in range(0, n, step):
        rows = slice(r0, min(r0 + step, n))
        X, Y = _subsample_coords(spec, rows)
        m = inside(X, Y).astype(np.float64)
        nr = rows.stop - rows.start
        out[rows] = m.reshape(nr, s, n, s).mean(axis=(1, 3))
    return out


def gen_disk(spec: PhantomSpec) -> Image2D:
    """Centred disk of ``base_radius`` with area-weighted boundary pixels."""
    spec.validate()
    r2 = spec.base_radius ** 2
    data = _rasterize(spec, lambda x, y: x * x + y * y < r2)
    return Image2D(data, spec.pixel_size)


def _rect(x, y, cx, cy, angle, half_len, half_wid):
    """Oriented rectangle centred at (cx, cy), long axis at ``angle``."""
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = x - cx, y - cy
    a = dx * c + dy * s
    b = -dx * s + dy * c
    return (np.abs(a) <= half_len) & (np.abs(b) <= half_wid)


def _layout(spec: PhantomSpec, rng: np.random.Generator):
    """Draw the feature geometry; returns (additive shapes, subtractive shapes)."""
    R = spec.base_radius
    reach = 0.97 * spec.image_size * spec.pixel_size / 2.0
    adds, subs = [], []
    angles = rng.permutation(12) * (2 * math.pi / 12) + rng.uniform(0, 2 * math.pi / 12)
    slot = iter(angles)
    if "fins" in spec.feature_set:
        for _ in range(3):
            t = next(slot)
            outer = min(1.3 * R, reach)
            inner = 0.8 * R
            mid = 0.5 * (inner + outer)
            adds.append(("rect", mid * math.cos(t), mid * math.sin(t), t,
                         0.5 * (outer - inner), 0.04 * R + 0.5 * spec.pixel_size))
    if "rods" in spec.feature_set:
        for _ in range(2):
            t = next(slot)
            rr = min(0.12 * R, max(reach - R, 0.0))
            if rr > 0:
                adds.append(("circle", R * math.cos(t), R * math.sin(t), rr))
    if "notches" in spec.feature_set:
        for _ in range(2):
            t = next(slot)
            depth = 0.2 * R
            cr = R - 0.5 * depth
            subs.append(("rect", (cr + 0.05 * R) * math.cos(t), (cr + 0.05 * R) * math.sin(t), t,
                         0.5 * depth + 0.05 * R, 0.05 * R + 0.5 * spec.pixel_size))
    return adds, subs


def _shape_mask(shape, x, y):
    if shape[0] == "rect":
        _, cx, cy, t, hl, hw = shape
        return _rect(x, y, cx, cy, t, hl, hw)
    _, cx, cy, r = shape
    return (x - cx) ** 2 + (y - cy) ** 2 < r * r


def _support_fn(spec: PhantomSpec, adds, subs, pores):
    r2 = spec.base_radius ** 2

    def inside(x, y):
        m = x * x + y * y < r2
        for shp in adds:
            m |= _shape_mask(shp, x, y)
        for shp in subs:
            m &= ~_shape_mask(shp, x, y)
        for cx, cy, r in pores:
            m &= (x - cx) ** 2 + (y - cy) ** 2 >= r * r
        return m

    return inside


def _place_pores(spec: PhantomSpec, rng, solid) -> list[tuple[float, float, float]]:
    """Rejection-sample non-overlapping pores fully inside the solid support."""
    budget = 100 * spec.num_pores
    margin = 2.0 * spec.pixel_size
    lo, hi = spec.pore_radius_range
    R = spec.base_radius
    pores: list[tuple[float, float, float]] = []
    ring = np.linspace(0.0, 2 * math.pi, 32, endpoint=False)
    tries = 0
    while len(pores) < spec.num_pores:
        if tries >= budget:
            raise RuntimeError(
                f"could not place {spec.num_pores} pores within the retry budget of {budget} "
                f"attempts ({len(pores)} placed)")
        tries += 1
        r = rng.uniform(lo, hi)
        rho = (R - r - margin) * math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2 * math.pi)
        cx, cy = rho * math.cos(phi), rho * math.sin(phi)
        if any(math.hypot(cx - px, cy - py) < r + pr + margin for px, py, pr in pores):
            continue
        # the pore plus margin must sit in solid material, clear of notches
        rim = r + margin
        xs = np.append(cx + rim * np.cos(ring), cx)
        ys = np.append(cy + rim * np.sin(ring), cy)
        if not np.all(solid(xs, ys)):
            continue
        pores.append((cx, cy, r))
    return pores


def gen_component(spec: PhantomSpec) -> Image2D:
    """Disk base plus seeded features and ``num_pores`` non-overlapping voids."""
    spec.validate()
    if not spec.feature_set and spec.num_pores == 0:
        return gen_disk(spec)
    rng = np.random.default_rng(spec.seed)
    adds, subs = _layout(spec, rng)
    solid = _support_fn(spec, adds, subs, [])
    pores = _place_pores(spec, rng, solid)
    data = _rasterize(spec, _support_fn(spec, adds, subs, pores))
    return Image2D(data, spec.pixel_size)
