"""Command-line driver: ``bhxct <command> --config cfg.json --out DIR [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from bhxct import bhcn, denoiser, metrics, phantom, physics, recon
from bhxct.core import (
    FAN,
    Geometry,
    Image2D,
    Sinogram,
    auto_window,
    export_pgm,
    load_image,
    load_sinogram,
    save_image,
    save_sinogram,
)
from bhxct.segment import binarize, otsu_threshold

log = logging.getLogger("bhxct")

CONFIG_VERSION = 1
RECON_METHODS = ("fbp", "sirt")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _override_seeds(cfg: Any, seed: int) -> Any:
    if isinstance(cfg, dict):
        return {k: (seed if k == "seed" else _override_seeds(v, seed)) for k, v in cfg.items()}
    if isinstance(cfg, list):
        return [_override_seeds(v, seed) for v in cfg]
    return cfg


def load_config(path, seed: int | None = None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config: file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be a JSON object")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {cfg.get('version')!r}")
    if seed is not None:
        cfg = _override_seeds(cfg, seed)
    cfg["_dir"] = str(Path(path).resolve().parent)
    return cfg


def _require(cfg: dict, key: str, prefix: str = "") -> Any:
    if key not in cfg:
        raise ConfigError(f"{prefix}{key}: required field missing")
    return cfg[key]


def _path(cfg: dict, key: str) -> Path:
    p = Path(_require(cfg, key))
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


def _build(prefix: str, fn, *args):
    try:
        return fn(*args)
    except KeyError as exc:
        raise ConfigError(f"{prefix}.{exc.args[0]}: required field missing") from exc
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        raise ConfigError(f"{prefix}.{msg}" if ":" in msg.split()[0] else f"{prefix}: {msg}") from exc


def geometry_from_config(g: dict) -> Geometry:
    """Either a full geometry record (with ``angles``) or a uniform-scan recipe."""
    if "angles" in g:
        return _build("geometry", Geometry.from_dict, g)
    kind = g.get("kind", "parallel")
    n = _require(g, "num_views", "geometry.")
    default_arc = 360.0 if kind == FAN else 180.0
    arc = math.radians(float(g.get("arc_deg", default_arc)))
    angles = np.arange(n, dtype=np.float64) * (arc / n)
    rec = {
        "kind": kind,
        "angles": angles,
        "num_bins": _require(g, "num_bins", "geometry."),
        "detector_spacing": _require(g, "detector_spacing", "geometry."),
        "detector_offset": g.get("detector_offset", 0.0),
        "source_to_center": g.get("source_to_center"),
        "source_to_detector": g.get("source_to_detector"),
    }
    return _build("geometry", Geometry.from_dict, rec)


def _preview(image: Image2D, path: Path, window=None) -> None:
    export_pgm(image, path, tuple(window) if window else auto_window(image))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


# -- commands ---------------------------------------------------------------

def cmd_phantom(cfg: dict, out: Path) -> None:
    spec = _build("phantom", phantom.PhantomSpec.from_dict, _require(cfg, "phantom"))
    kind = cfg.get("kind", "component")
    if kind not in ("disk", "component"):
        raise ConfigError(f"kind: expected 'disk' or 'component', got {kind!r}")
    img = phantom.gen_disk(spec) if kind == "disk" else phantom.gen_component(spec)
    save_image(out / "phantom", img)
    _preview(img, out / "phantom.pgm", (0.0, 1.0))


def cmd_scan(cfg: dict, out: Path) -> None:
    support = load_image(_path(cfg, "phantom"))
    geom = geometry_from_config(_require(cfg, "geometry"))
    params = _build("bh_params", physics.BhParams.from_dict, _require(cfg, "bh_params"))
    noise = _build("noise", physics.NoiseSpec.from_dict, cfg.get("noise"))
    bh, ideal, thick = physics.simulate_scan(support, geom, params, noise)
    save_sinogram(out / "sino_bh", bh)
    save_sinogram(out / "sino_ideal", ideal)
    save_sinogram(out / "thickness", thick)


def _write_loss_csv(path: Path, hist: dict) -> None:
    keys = [k for k in ("train_loss", "val_loss") if hist.get(k)]
    rows = max(len(hist[k]) for k in keys)
    with open(path, "w") as fh:
        fh.write("epoch," + ",".join(keys) + "\n")
        for e in range(rows):
            fh.write(f"{e}," + ",".join(repr(hist[k][e]) if e < len(hist[k]) else "" for k in keys) + "\n")


def cmd_bhc_train(cfg: dict, out: Path) -> None:
    ranges = _build("ranges", bhcn.ParamRanges.from_dict, cfg.get("ranges", {}))
    n = int(cfg.get("num_samples", 1_000_000))
    data = bhcn.synth_training_set(ranges, n, int(cfg.get("seed", 0)))
    tc = _build("train", bhcn.TrainConfig.from_dict, cfg.get("train", {}))
    model = bhcn.train_bhcn(data, tc)
    model.save(out / "bhcn_model.json")
    _write_loss_csv(out / "bhcn_loss.csv", model.history)


def fit_report(sino: Sinogram, model: bhcn.Mlp, recon_size: int, pixel_size: float,
               d_min: float = 0.5, degree: int = 5, d_max: float | None = None) -> tuple[dict, Sinogram]:
    thick = bhcn.estimate_thickness(sino, recon_size, pixel_size)
    est = bhcn.estimate_params(model, sino, thick, d_min)
    dmax = d_max if d_max is not None else 1.2 * float(thick.data.max())
    poly = bhcn.fit_linearization(est.params, dmax, degree)
    report = {
        "params": est.params.to_dict(),
        "bins_used": est.count,
        "d_min": d_min,
        "d_max": dmax,
        "degree": degree,
        "fit_max_residual": poly.max_residual,
        "polynomial": poly.to_dict(),
    }
    return report, thick


def cmd_bhc_fit(cfg: dict, out: Path) -> None:
    sino = load_sinogram(_path(cfg, "sinogram"))
    model = bhcn.Mlp.load(_path(cfg, "model"))
    report, thick = fit_report(sino, model, int(cfg.get("recon_size", 256)), float(cfg.get("pixel_size", 0.08)),
                               float(cfg.get("d_min", 0.5)), int(cfg.get("degree", 5)), cfg.get("d_max"))
    save_sinogram(out / "thickness_est", thick)
    _write_json(out / "bhc_report.json", report)


def cmd_bhc_apply(cfg: dict, out: Path) -> None:
    sino = load_sinogram(_path(cfg, "sinogram"))
    if "polynomial" in cfg:
        poly_d = cfg["polynomial"]
    else:
        poly_d = json.loads(_path(cfg, "report").read_text())["polynomial"]
    poly = _build("polynomial", bhcn.LinearizationPoly.from_dict, poly_d)
    corrected = bhcn.apply_correction(sino, poly)
    save_sinogram(out / "corrected", corrected)
    _write_json(out / "bhc_apply.json", {"extrapolated": corrected.meta["extrapolated"],
                                         "num_extrapolated": corrected.meta["num_extrapolated"]})


def _recon(sino: Sinogram, method: str, width: int, height: int, pixel_size: float, cfg: dict) -> Image2D:
    if method == "fbp":
        return recon.fbp(sino, width, height, pixel_size, cfg.get("window", "ramlak"))
    return recon.sirt(sino, width, height, pixel_size, int(cfg.get("iters", 200)), bool(cfg.get("nonneg", True)))


def cmd_recon(cfg: dict, out: Path) -> None:
    method = cfg.get("method", "fbp")
    if method not in RECON_METHODS:
        raise ConfigError(f"method: unknown {method!r}; valid options: {', '.join(RECON_METHODS)}")
    if cfg.get("window", "ramlak") not in recon.WINDOWS:
        raise ConfigError(f"window: unknown {cfg['window']!r}; valid options: {', '.join(recon.WINDOWS)}")
    sino = load_sinogram(_path(cfg, "sinogram"))
    w = int(cfg.get("width", 256))
    h = int(cfg.get("height", w))
    img = _recon(sino, method, w, h, float(cfg.get("pixel_size", 0.08)), cfg)
    save_image(out / "recon", img)
    _preview(img, out / "recon.pgm", cfg.get("pgm_window"))


def _manifest(cfg: dict) -> list[dict]:
    m = _require(cfg, "manifest")
    if isinstance(m, str):
        m = json.loads(_path(cfg, "manifest").read_text())
    if not isinstance(m, list) or not m:
        raise ConfigError("manifest: must be a non-empty list of {input, target} entries")
    return m


def cmd_dn_train(cfg: dict, out: Path) -> None:
    patch = int(cfg.get("patch", 64))
    stride = int(cfg.get("stride", patch))
    augment = int(cfg.get("augment", 1))
    seed = int(cfg.get("seed", 0))
    parts = []
    for i, entry in enumerate(_manifest(cfg)):
        entry = {**entry, "_dir": cfg["_dir"]}
        x = load_image(_path(entry, "input"))
        y = load_image(_path(entry, "target"))
        if not x.congruent(y):
            raise ConfigError(f"manifest[{i}]: input {entry['input']} {x.data.shape} and target "
                              f"{entry['target']} {y.data.shape} differ in shape")
        parts.append(denoiser.extract_patch_pairs(x, y, patch, stride, seed + i, augment, source=str(i)))
    data = denoiser.PatchDataset.concat(parts)
    tc = _build("train", denoiser.DenoiserConfig.from_dict, {"seed": seed, **cfg.get("train", {})})
    net = denoiser.train_denoiser(data, tc)
    net.save(out / "denoiser_model.json")
    _write_loss_csv(out / "loss_history.csv", net.history)


def cmd_dn_apply(cfg: dict, out: Path) -> None:
    net = denoiser.Cnn.load(_path(cfg, "model"))
    img = load_image(_path(cfg, "image"))
    res = denoiser.denoise(net, img)
    save_image(out / "denoised", res)
    _preview(res, out / "denoised.pgm", cfg.get("pgm_window"))


def evaluate(image: Image2D, reference: Image2D, data_range: float | None = None,
             window: int = 7, k1: float = 0.01, k2: float = 0.03) -> dict:
    L = float(data_range) if data_range is not None else metrics.default_data_range(reference)
    return {
        "psnr_db": metrics.psnr(image, reference, L),
        "ssim": metrics.ssim(image, reference, L, window, k1, k2),
        "data_range": L,
    }


def cmd_eval(cfg: dict, out: Path) -> None:
    img = load_image(_path(cfg, "image"))
    ref = load_image(_path(cfg, "reference"))
    if not img.congruent(ref):
        raise ConfigError(f"image/reference: shape mismatch {img.data.shape} vs {ref.data.shape}")
    s = cfg.get("ssim", {})
    res = evaluate(img, ref, cfg.get("data_range"), int(s.get("window", 7)),
                   float(s.get("k1", 0.01)), float(s.get("k2", 0.03)))
    res = {**{k: _jsonable(v) for k, v in res.items()},
           "image": str(_path(cfg, "image")), "reference": str(_path(cfg, "reference"))}
    if "profile_row" in cfg:
        row = int(cfg["profile_row"])
        (out / "profile.csv").write_text(metrics.profile_csv(metrics.line_profile(img, row)))
        res["profile_row"] = row
    _write_json(out / "eval.json", res)


def _stage(name: str, fn, *args):
    log.info("stage %s", name)
    try:
        return fn(*args)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_pipeline(cfg: dict, out: Path) -> None:
    """Scan -> BHCN fit + correction -> sparse FBP -> denoise -> evaluation.

    Writes ``inputs/``, ``stages/`` and ``report.json`` under ``out``.
    """
    inputs, stages = out / "inputs", out / "stages"
    inputs.mkdir(exist_ok=True)
    stages.mkdir(exist_ok=True)
    _write_json(inputs / "config.json", {k: v for k, v in cfg.items() if k != "_dir"})
    size = int(cfg.get("recon_size", 256))
    px = float(cfg.get("pixel_size", 0.08))
    factor = int(cfg.get("subsample_factor", 4))

    truth = None
    support = None
    if "measured_sinogram" in cfg:
        dense = load_sinogram(_path(cfg, "measured_sinogram"))
    else:
        spec = _build("phantom", phantom.PhantomSpec.from_dict, _require(cfg, "phantom"))
        geom = geometry_from_config(_require(cfg, "geometry"))
        truth = _build("bh_params", physics.BhParams.from_dict, _require(cfg, "bh_params"))
        noise = _build("noise", physics.NoiseSpec.from_dict, cfg.get("noise"))
        kind = cfg.get("phantom_kind", "component")
        support = _stage("phantom", phantom.gen_disk if kind == "disk" else phantom.gen_component, spec)
        save_image(inputs / "phantom", support)
        dense, _, thick_true = _stage("scan", physics.simulate_scan, support, geom, truth, noise)
        save_sinogram(inputs / "thickness_true", thick_true)
    save_sinogram(inputs / "sino_dense", dense)

    model = bhcn.Mlp.load(_path(cfg, "bhcn_model"))
    report_bhc, thick = _stage("bhc-fit", fit_report, dense, model, size, px,
                               float(cfg.get("d_min", 0.5)), int(cfg.get("degree", 5)), cfg.get("d_max"))
    save_sinogram(stages / "thickness_est", thick)
    poly = bhcn.LinearizationPoly.from_dict(report_bhc["polynomial"])
    corrected = _stage("bhc-apply", bhcn.apply_correction, dense, poly)
    save_sinogram(stages / "sino_corrected", corrected)

    sparse_raw = _stage("subsample", recon.subsample_views, dense, factor)
    sparse_cor = _stage("subsample", recon.subsample_views, corrected, factor)
    images = {
        "fbp_uncorrected": _stage("fbp", recon.fbp, sparse_raw, size, size, px),
        "fbp_corrected": _stage("fbp", recon.fbp, sparse_cor, size, size, px),
    }
    net = denoiser.Cnn.load(_path(cfg, "denoiser_model"))
    images["denoised"] = _stage("denoise", denoiser.denoise, net, images["fbp_corrected"])

    ref_kind = cfg.get("reference", "sirt")
    if ref_kind == "sirt":
        reference = _stage("reference", recon.sirt, corrected, size, size, px, int(cfg.get("sirt_iters", 200)))
    elif ref_kind == "phantom":
        if support is None or truth is None:
            raise ConfigError("reference: 'phantom' needs a simulated scan")
        reference = support.replace(support.data * truth.effective_mu)
    else:
        reference = load_image(_path(cfg, "reference"))
    save_image(stages / "reference", reference)

    if support is not None:
        mask = support.replace(support.data > 0.5)
    else:
        fc = images["fbp_corrected"]
        mask = binarize(fc, otsu_threshold(fc))

    stage_metrics = {}
    L = metrics.default_data_range(reference)
    (out / "profiles").mkdir(exist_ok=True)
    row = int(cfg.get("profile_row", size // 2))
    for name, img in images.items():
        save_image(stages / name, img)
        _preview(img, stages / f"{name}.pgm", cfg.get("pgm_window"))
        m = evaluate(img, reference, L)
        m["cupping_index"] = _stage("metrics", metrics.cupping_index, img, mask)
        stage_metrics[name] = {k: _jsonable(v) for k, v in m.items()}
        (out / "profiles" / f"{name}.csv").write_text(metrics.profile_csv(metrics.line_profile(img, row)))
    (out / "profiles" / "reference.csv").write_text(metrics.profile_csv(metrics.line_profile(reference, row)))

    report = {
        "version": CONFIG_VERSION,
        "subsample_factor": factor,
        "num_views_dense": dense.num_views,
        "num_views_sparse": sparse_cor.num_views,
        "reference": ref_kind if ref_kind in ("sirt", "phantom") else str(_path(cfg, "reference")),
        "data_range": L,
        "bhc": report_bhc,
        "extrapolated_bins": corrected.meta["num_extrapolated"],
        "stages": stage_metrics,
    }
    if truth is not None:
        report["bh_params_true"] = truth.to_dict()
    _write_json(out / "report.json", report)


COMMANDS = {
    "phantom": cmd_phantom,
    "scan": cmd_scan,
    "bhc-train": cmd_bhc_train,
    "bhc-fit": cmd_bhc_fit,
    "bhc-apply": cmd_bhc_apply,
    "recon": cmd_recon,
    "dn-train": cmd_dn_train,
    "dn-apply": cmd_dn_apply,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bhxct", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"bhxct {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, OSError, ValueError, RuntimeError) as exc:
        print(f"bhxct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
