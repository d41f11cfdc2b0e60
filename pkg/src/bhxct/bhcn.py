"""Beam-hardening correction network.

A small fully-connected network maps one measurement ``(p, d)`` (beam-hardened
projection, path length in mm) to the model parameters ``(alpha, mu1, mu2)``.
It is trained on synthetic samples of the bimodal model only. At inference the
per-bin predictions of a scan are averaged and turned into a linearisation
polynomial that maps beam-hardened projections onto the linear relation.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bhxct.core import Image2D, Sinogram
from bhxct.physics import BhParams, bh_projection, ideal_projection
from bhxct.projector import forward_project
from bhxct.recon import fbp
from bhxct.segment import binarize, otsu_threshold

log = logging.getLogger(__name__)

MODEL_FORMAT = 1
ACTIVATIONS = ("relu", "tanh")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamRanges:
    """Sampling box for synthetic training data.

    ``mu1`` is drawn from ``[mu2, max_ratio * mu2]`` clipped to ``mu1``'s own
    interval; draws with ``mu1 < mu2`` are rejected.
    """

    d: tuple[float, float] = (0.0, 40.0)
    alpha: tuple[float, float] = (0.1, 10.0)
    mu1: tuple[float, float] = (0.01, 5.0)
    mu2: tuple[float, float] = (0.01, 1.0)
    max_ratio: float = 5.0

    def __post_init__(self):
        for name in ("d", "alpha", "mu1", "mu2"):
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
            if lo < 0 or hi < lo:
                raise ValueError(f"ranges.{name}: need 0 <= lo <= hi, got ({lo}, {hi})")
        if self.mu2[0] <= 0:
            raise ValueError("ranges.mu2: lower bound must be > 0")
        if self.max_ratio < 1:
            raise ValueError("ranges.max_ratio: must be >= 1")
        if self.mu1[1] < self.mu2[0]:
            raise ValueError("ranges: mu1 interval lies entirely below mu2 interval")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> ParamRanges:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
                      if k in cls.__dataclass_fields__})

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``(n, 4)`` array of ``d, alpha, mu1, mu2`` draws."""
        out = np.empty((n, 4))
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 16)
            d = rng.uniform(*self.d, m)
            a = rng.uniform(*self.alpha, m)
            mu2 = rng.uniform(*self.mu2, m)
            lo = np.maximum(mu2, self.mu1[0])
            hi = np.minimum(self.max_ratio * mu2, self.mu1[1])
            ok = hi >= lo
            mu1 = lo + (hi - lo) * rng.uniform(size=m)
            ok &= mu1 >= mu2
            take = np.flatnonzero(ok)[: n - filled]
            out[filled: filled + take.size] = np.column_stack([d, a, mu1, mu2])[take]
            filled += take.size
        return out


DEFAULT_RANGES = ParamRanges()


def _moments(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


@dataclass
class TrainingSet:
    features: np.ndarray          # (n, 2): p, d
    targets: np.ndarray           # (n, 3): alpha, mu1, mu2
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray
    ranges: ParamRanges

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def x(self) -> np.ndarray:
        return (self.features - self.x_shift) / self.x_scale

    @property
    def y(self) -> np.ndarray:
        return (self.targets - self.y_shift) / self.y_scale


def synth_training_set(ranges: ParamRanges, n: int, seed: int) -> TrainingSet:
    """Uniform draws of ``(d, alpha, mu1, mu2)`` with ``p`` from the BH model."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s = ranges.sample(rng, n)
    d, a, mu1, mu2 = s.T
    p = mu2 * d + np.log1p(a) - np.log1p(a * np.exp(-(mu1 - mu2) * d))
    features = np.column_stack([p, d])
    targets = np.column_stack([a, mu1, mu2])
    xs, xc = _moments(features)
    ys, yc = _moments(targets)
    return TrainingSet(features, targets, xs, xc, ys, yc, ranges)


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    epochs: int = 30
    batch: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    activation: str = "relu"
    val_fraction: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return cls(**kw)


@dataclass
class Mlp:
    sizes: list[int]
    weights: list[np.ndarray]     # weights[l] has shape (sizes[l], sizes[l+1])
    biases: list[np.ndarray]
    activation: str
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray
    ranges: ParamRanges = field(default_factory=ParamRanges)
    config: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sizes[0] != 2 or self.sizes[-1] != 3:
            raise ValueError("BHCN maps 2 inputs to 3 outputs")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise ValueError(f"layer {l} has incompatible shapes {w.shape}, {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if np.any(self.x_scale <= 0) or np.any(self.y_scale <= 0):
            raise ValueError("normalisation scales must be > 0")

    @classmethod
    def init(cls, hidden, data: TrainingSet, activation: str, rng) -> Mlp:
        sizes = [2, *hidden, 3]
        weights = [rng.normal(0.0, math.sqrt(2.0 / m), (m, k)) for m, k in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(k) for k in sizes[1:]]
        return cls(sizes, weights, biases, activation, data.x_shift, data.x_scale,
                   data.y_shift, data.y_scale, data.ranges)

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT,
            "kind": "bhcn-mlp",
            "layer_sizes": self.sizes,
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_normalization": {"shift": self.x_shift.tolist(), "scale": self.x_scale.tolist(),
                                    "features": ["p", "d_mm"]},
            "output_normalization": {"shift": self.y_shift.tolist(), "scale": self.y_scale.tolist(),
                                     "targets": ["alpha", "mu1", "mu2"]},
            "ranges": self.ranges.to_dict(),
            "config": self.config,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Mlp:
        if d.get("format_version") != MODEL_FORMAT:
            raise ValueError(f"unsupported BHCN model format {d.get('format_version')!r}")
        if d.get("kind") != "bhcn-mlp":
            raise ValueError(f"not a BHCN model (kind={d.get('kind')!r})")
        sizes = [int(s) for s in d["layer_sizes"]]
        weights = [np.asarray(w, dtype=np.float64).reshape(m, k)
                   for w, m, k in zip(d["weights"], sizes[:-1], sizes[1:])]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        xn, yn = d["input_normalization"], d["output_normalization"]
        return cls(sizes, weights, biases, d["activation"],
                   np.asarray(xn["shift"], float), np.asarray(xn["scale"], float),
                   np.asarray(yn["shift"], float), np.asarray(yn["scale"], float),
                   ParamRanges.from_dict(d.get("ranges", {})), d.get("config", {}), d.get("history", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> Mlp:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0.0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def forward_normalized(mlp: Mlp, xn: np.ndarray, cache: list | None = None) -> np.ndarray:
    a = xn
    last = len(mlp.weights) - 1
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w + b
        if cache is not None:
            cache.append((a, z))
        a = z if l == last else _act(z, mlp.activation)
    return a


def loss_and_grads(mlp: Mlp, xn: np.ndarray, yn: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared error over all outputs and its gradient, in ``params()`` order."""
    cache: list = []
    out = forward_normalized(mlp, xn, cache)
    diff = out - yn
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    nl = len(mlp.weights)
    gw: list = [None] * nl
    gb: list = [None] * nl
    for l in range(nl - 1, -1, -1):
        a_in, _ = cache[l]
        gw[l] = a_in.T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            z_prev = cache[l - 1][1]
            delta = (delta @ mlp.weights[l].T) * _act_grad(z_prev, a_in, mlp.activation)
    return loss, [*gw, *gb]


def _full_loss(mlp: Mlp, x: np.ndarray, y: np.ndarray, chunk: int = 65536) -> float:
    total = 0.0
    for i in range(0, x.shape[0], chunk):
        d = forward_normalized(mlp, x[i:i + chunk]) - y[i:i + chunk]
        total += float(np.sum(d * d))
    return total / y.size


def train_bhcn(data: TrainingSet, config: TrainConfig | None = None) -> Mlp:
    """Adam on normalised MSE with plateau learning-rate halving.

    After every epoch the full training loss is evaluated; if it went up, the
    epoch is rolled back and the learning rate halved, so the recorded training
    loss never increases. Accepted epochs grow the rate by 10% again, capped
    at the configured value. A fraction of the samples is held out for validation.
    """
    cfg = config or TrainConfig()
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    x_all, y_all = data.x, data.y
    order = rng.permutation(len(data))
    n_val = int(round(cfg.val_fraction * len(data))) if len(data) > 1 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x, y = x_all[tr_idx], y_all[tr_idx]
    xv, yv = x_all[val_idx], y_all[val_idx]

    mlp = Mlp.init(cfg.hidden, data, cfg.activation, rng)
    params = mlp.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.learning_rate
    step = 0
    train_hist = [_full_loss(mlp, x, y)]
    val_hist = [_full_loss(mlp, xv, yv)] if n_val else []
    lr_hist = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        snapshot = [p.copy() for p in params]
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            loss, grads = loss_and_grads(mlp, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for p, g, mm, vv in zip(params, grads, m, v):
                mm *= b1
                mm += (1.0 - b1) * g
                vv *= b2
                vv += (1.0 - b2) * g * g
                p -= lr * (mm / c1) / (np.sqrt(vv / c2) + eps)
        full = _full_loss(mlp, x, y)
        if not math.isfinite(full):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        if full > train_hist[-1]:
            for p, s in zip(params, snapshot):
                p[...] = s
            # restoring the old moments would replay the same uphill step
            for a in (*m, *v):
                a[...] = 0.0
            step = 0
            lr *= 0.5
            full = train_hist[-1]
            log.info("epoch %d: loss rose, rolled back, lr -> %.3g", epoch, lr)
        else:
            # let a halved rate recover slowly after accepted epochs
            lr = min(lr * 1.1, cfg.learning_rate)
        train_hist.append(full)
        lr_hist.append(lr)
        if n_val:
            val_hist.append(_full_loss(mlp, xv, yv))
        log.info("epoch %d: train %.3e val %s", epoch, full, f"{val_hist[-1]:.3e}" if n_val else "-")
    mlp.config = {**asdict(cfg), "hidden": list(cfg.hidden), "num_samples": len(data)}
    mlp.history = {"train_loss": train_hist, "val_loss": val_hist, "learning_rate": lr_hist}
    return mlp


def predict(mlp: Mlp, p, d) -> np.ndarray:
    """Vectorised forward pass returning clamped ``(n, 3)`` parameter rows."""
    feats = np.column_stack([np.ravel(p), np.ravel(d)]).astype(np.float64)
    out = forward_normalized(mlp, (feats - mlp.x_shift) / mlp.x_scale) * mlp.y_scale + mlp.y_shift
    r = mlp.ranges
    alpha = np.clip(out[:, 0], max(r.alpha[0], 0.0), r.alpha[1])
    m1 = np.clip(out[:, 1], r.mu2[0], max(r.mu1[1], r.mu2[1]))
    m2 = np.clip(out[:, 2], r.mu2[0], max(r.mu1[1], r.mu2[1]))
    return np.column_stack([alpha, np.maximum(m1, m2), np.minimum(m1, m2)])


def mlp_forward(mlp: Mlp, p: float, d: float) -> BhParams:
    a, m1, m2 = predict(mlp, p, d)[0]
    return BhParams(float(a), float(m1), float(m2))


def estimate_thickness(sino: Sinogram, recon_size: int, pixel_size: float,
                       return_mask: bool = False):
    """Path length per bin through the Otsu-segmented FBP reconstruction."""
    recon = fbp(sino, recon_size, recon_size, pixel_size)
    mask = binarize(recon, otsu_threshold(recon))
    thick = forward_project(mask, sino.geometry)
    thick = thick.replace(np.maximum(thick.data, 0.0))
    return (thick, mask) if return_mask else thick


@dataclass(frozen=True)
class ParamEstimate:
    params: BhParams
    count: int


def estimate_params(mlp: Mlp, sino: Sinogram, thickness: Sinogram, d_min: float = 0.5) -> ParamEstimate:
    """Average the per-bin predictions over bins with thickness above ``d_min``."""
    if sino.data.shape != thickness.data.shape:
        raise ValueError("sinogram and thickness are not congruent")
    sel = thickness.data > d_min
    count = int(sel.sum())
    if count == 0:
        raise ValueError(f"no bin has thickness above d_min={d_min} mm")
    pred = predict(mlp, sino.data[sel], thickness.data[sel])
    a, m1, m2 = pred.mean(axis=0)
    return ParamEstimate(BhParams(float(a), float(m1), float(m2)), count)


@dataclass
class LinearizationPoly:
    """``p_lin = sum_k coeffs[k-1] * p^k``; no constant term."""

    coeffs: np.ndarray
    p_max: float
    max_residual: float = 0.0

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        acc = np.zeros_like(p)
        for c in self.coeffs[::-1]:
            acc = (acc + c) * p
        return acc

    def derivative(self, p):
        p = np.asarray(p, dtype=np.float64)
        acc = np.zeros_like(p)
        k = len(self.coeffs)
        for j in range(k, 0, -1):
            acc = acc * p + j * self.coeffs[j - 1]
        return acc

    def is_increasing(self, samples: int = 4001) -> bool:
        grid = np.linspace(0.0, self.p_max, samples)
        return bool(np.all(self.derivative(grid) > 0.0))

    def to_dict(self) -> dict:
        return {"coefficients": [float(c) for c in self.coeffs], "p_max": self.p_max,
                "max_residual": self.max_residual}

    @classmethod
    def from_dict(cls, d: dict) -> LinearizationPoly:
        return cls(np.asarray(d["coefficients"], dtype=np.float64), float(d["p_max"]),
                   float(d.get("max_residual", 0.0)))

    @classmethod
    def identity(cls, p_max: float = 1.0) -> LinearizationPoly:
        return cls(np.array([1.0]), p_max)


def fit_linearization(params: BhParams, d_max: float, degree: int = 5) -> LinearizationPoly:
    """Least-squares map from beam-hardened to linear projections.

    Sampled at 1000 uniform thicknesses on ``[0, d_max]``. Powers are fitted on
    ``p / p_max`` for conditioning and rescaled afterwards.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if not d_max > 0:
        raise ValueError("d_max must be > 0")
    d = np.linspace(0.0, d_max, 1000)
    p = bh_projection(d, params)
    target = ideal_projection(d, params)
    p_max = float(p[-1])
    u = p / p_max
    V = np.column_stack([u ** k for k in range(1, degree + 1)])
    cond = np.linalg.cond(V.T @ V)
    if not cond < 1e14:
        raise ValueError(f"ill-conditioned linearisation fit (cond={cond:.2e}); use a lower degree")
    c, *_ = np.linalg.lstsq(V, target, rcond=None)
    coeffs = c / p_max ** np.arange(1, degree + 1)
    poly = LinearizationPoly(coeffs, p_max)
    poly.max_residual = float(np.max(np.abs(poly(p) - target)))
    if not poly.is_increasing():
        warnings.warn("linearisation polynomial is not strictly increasing on its domain", stacklevel=2)
    return poly


def apply_correction(sino: Sinogram, poly: LinearizationPoly) -> Sinogram:
    """Evaluate the polynomial per bin; flags bins beyond the fitted domain."""
    over = int(np.count_nonzero(sino.data > poly.p_max))
    if over:
        log.warning("%d bins exceed the fitted domain p_max=%.4g and were extrapolated", over, poly.p_max)
    return sino.replace(poly(sino.data), extrapolated=bool(over), num_extrapolated=over)
