"""Bias-free U-Net mapping sparse-view FBP images to dense-view SIRT quality.

No layer adds a constant: convolutions carry no bias and there is no
normalisation layer. With ReLU, max-pooling and concatenation skips the whole
network is positively homogeneous, ``f(a x) = a f(x)`` for ``a > 0``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from bhxct.core import Image2D

log = logging.getLogger(__name__)

MODEL_FORMAT = 1


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.ReLU(),
    )


class Cnn(nn.Module):
    """Encoder-decoder with ``scales`` pooling levels and concatenation skips.

    ``scale`` divides the input before the network and multiplies the output
    after it (a fixed intensity normalisation that keeps homogeneity). With
    ``residual`` the network predicts a correction added to its input.
    """

    def __init__(self, scales: int = 2, base_channels: int = 16, residual: bool = True,
                 scale: float = 1.0):
        super().__init__()
        if scales < 1:
            raise ValueError("scales must be >= 1")
        self.scales = scales
        self.base_channels = base_channels
        self.residual = residual
        self.scale = float(scale)
        ch = [base_channels * 2 ** k for k in range(scales + 1)]
        self.down = nn.ModuleList([_double_conv(1 if k == 0 else ch[k - 1], ch[k]) for k in range(scales)])
        self.bottom = _double_conv(ch[scales - 1], ch[scales])
        self.upconv = nn.ModuleList(
            [nn.ConvTranspose2d(ch[k + 1], ch[k], 2, stride=2, bias=False) for k in reversed(range(scales))])
        self.up = nn.ModuleList([_double_conv(2 * ch[k], ch[k]) for k in reversed(range(scales))])
        self.head = nn.Conv2d(ch[0], 1, 1, bias=False)
        self.history: dict = {}
        self.config: dict = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = x / self.scale
        skips = []
        for block in self.down:
            z = block(z)
            skips.append(z)
            z = F.max_pool2d(z, 2)
        z = self.bottom(z)
        for upc, block, skip in zip(self.upconv, self.up, reversed(skips)):
            z = block(torch.cat([skip, upc(z)], dim=1))
        z = self.head(z) * self.scale
        return x + z if self.residual else z

    def topology(self) -> dict:
        return {"scales": self.scales, "base_channels": self.base_channels,
                "residual": self.residual, "scale": self.scale}

    def has_bias(self) -> bool:
        return any(getattr(m, "bias", None) is not None for m in self.modules()
                   if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, nn.BatchNorm2d)))

    def to_dict(self) -> dict:
        kernels = {name: {"shape": list(t.shape), "data": t.detach().double().ravel().tolist()}
                   for name, t in self.state_dict().items()}
        return {"format_version": MODEL_FORMAT, "kind": "bias-free-unet", "topology": self.topology(),
                "kernels": kernels, "config": self.config, "history": self.history}

    @classmethod
    def from_dict(cls, d: dict) -> Cnn:
        if d.get("format_version") != MODEL_FORMAT:
            raise ValueError(f"unsupported denoiser model format {d.get('format_version')!r}")
        if d.get("kind") != "bias-free-unet":
            raise ValueError(f"not a denoiser model (kind={d.get('kind')!r})")
        net = cls(**d["topology"])
        state = {k: torch.tensor(v["data"], dtype=torch.float32).reshape(v["shape"])
                 for k, v in d["kernels"].items()}
        net.load_state_dict(state)
        net.config = d.get("config", {})
        net.history = d.get("history", {})
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> Cnn:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PatchDataset:
    inputs: np.ndarray            # (n, patch, patch)
    targets: np.ndarray
    patch: int
    stride: int
    sources: list[str] = field(default_factory=list)
    augmented: np.ndarray | None = None    # bool per pair

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def concat(cls, parts: list[PatchDataset]) -> PatchDataset:
        if not parts:
            raise ValueError("nothing to concatenate")
        if len({p.patch for p in parts}) != 1:
            raise ValueError("patch sizes differ")
        return cls(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]),
                   parts[0].patch, parts[0].stride, [s for p in parts for s in p.sources],
                   np.concatenate([p.augmented for p in parts]))


def _grid(n: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, n - patch + 1, stride))
    return starts or [0]


def _augment(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    a = np.rot90(a, k)
    return np.ascontiguousarray(a[:, ::-1] if flip else a)


def extract_patch_pairs(inp: Image2D, target: Image2D, patch: int, stride: int, seed: int,
                        augment: int = 1, source: str = "") -> PatchDataset:
    """Regular-grid patch pairs plus ``augment`` random rotation/flip copies of each."""
    if inp.data.shape != target.data.shape:
        raise ValueError(f"input/target shape mismatch: {inp.data.shape} vs {target.data.shape}")
    if patch > min(inp.data.shape):
        raise ValueError(f"patch {patch} exceeds image size {inp.data.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rng = np.random.default_rng(seed)
    xs, ys, aug, src = [], [], [], []
    for r in _grid(inp.height, patch, stride):
        for c in _grid(inp.width, patch, stride):
            win = (slice(r, r + patch), slice(c, c + patch))
            a, b = inp.data[win], target.data[win]
            xs.append(a)
            ys.append(b)
            aug.append(False)
            src.append(f"{source}@{r},{c}")
            for _ in range(augment):
                k, flip = int(rng.integers(4)), bool(rng.integers(2))
                xs.append(_augment(a, k, flip))
                ys.append(_augment(b, k, flip))
                aug.append(True)
                src.append(f"{source}@{r},{c}/rot{k}{'f' if flip else ''}")
    return PatchDataset(np.stack(xs), np.stack(ys), patch, stride, src, np.array(aug))


@dataclass
class DenoiserConfig:
    scales: int = 2
    base_channels: int = 16
    epochs: int = 30
    batch: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    residual: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class TrainingDiverged(RuntimeError):
    pass


def _mse(net: Cnn, x: torch.Tensor, y: torch.Tensor, batch: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            total += float(((net(x[i:i + batch]) - y[i:i + batch]) ** 2).sum())
    return total / y.numel()


def train_denoiser(data: PatchDataset, config: DenoiserConfig | None = None) -> Cnn:
    """Adam on patch MSE. ``net.history`` holds per-epoch train/validation loss.

    Entry 0 of each history list is the loss of the initial network.
    """
    cfg = config or DenoiserConfig()
    if len(data) == 0:
        raise ValueError("empty patch dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(data))
    n_val = int(math.floor(cfg.val_fraction * len(data))) if len(data) > 1 else 0
    val, tr = order[:n_val], order[n_val:]
    x = torch.from_numpy(data.inputs[tr][:, None].astype(np.float32))
    y = torch.from_numpy(data.targets[tr][:, None].astype(np.float32))
    xv = torch.from_numpy(data.inputs[val][:, None].astype(np.float32))
    yv = torch.from_numpy(data.targets[val][:, None].astype(np.float32))
    scale = float(np.sqrt(np.mean(data.inputs.astype(np.float64) ** 2))) or 1.0
    net = Cnn(cfg.scales, cfg.base_channels, cfg.residual, scale)
    if cfg.residual:
        # start from the identity map
        nn.init.zeros_(net.head.weight)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    hist = {"train_loss": [_mse(net, x, y)], "val_loss": [_mse(net, xv, yv)] if n_val else []}
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.from_numpy(rng.permutation(n))
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            opt.zero_grad()
            loss = F.mse_loss(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
        net.eval()
        hist["train_loss"].append(_mse(net, x, y))
        if n_val:
            hist["val_loss"].append(_mse(net, xv, yv))
        if not math.isfinite(hist["train_loss"][-1]):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        log.info("epoch %d: train %.3e val %s", epoch, hist["train_loss"][-1],
                 f"{hist['val_loss'][-1]:.3e}" if n_val else "-")
    net.history = hist
    net.config = {**asdict(cfg), "num_pairs": len(data), "patch": data.patch}
    return net


def denoise(net: Cnn, image: Image2D) -> Image2D:
    """Full-image forward pass; reflect-pads to a multiple of ``2**scales``."""
    m = 2 ** net.scales
    h, w = image.data.shape
    ph, pw = (-h) % m, (-w) % m
    a = image.data
    if ph or pw:
        mode = "reflect" if min(h, w) > max(ph, pw) else "symmetric"
        a = np.pad(a, ((0, ph), (0, pw)), mode=mode)
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None])
    return image.replace(out[0, 0, :h, :w].double().numpy())
