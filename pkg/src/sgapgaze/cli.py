"""Command-line entry point: synth, train, eval, infer, map-gaze, gradcheck.

Exit codes: 0 success, 2 input/validation, 3 numerical abort,
4 geometric/protocol failure, 5 gradcheck failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .data import DecodeError, ManifestError, SampleRecord, load_manifest, read_image, split_by_driver, to_chw, write_ppm
from .homography import (
    DegeneracyError,
    HorizonError,
    InsufficientDataError,
    estimate_homography,
    estimate_homography_ransac,
    read_correspondences,
    reprojection_error,
    transform_gaze_chain,
)
from .model import collate, forward, prepare_sample
from .synth import SynthConfig, generate_synthetic, write_dataset
from .training import (
    CheckpointCorrupt,
    CheckpointIncompatible,
    NumericalAbort,
    SplitContamination,
    TrainConfig,
    evaluate,
    init_training_params,
    load_checkpoint,
    make_optimizer,
    prepare_records,
    save_checkpoint,
    train,
    write_loss_curve,
)

logger = logging.getLogger("sgapgaze")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_GEOMETRY, EXIT_GRADCHECK = 0, 2, 3, 4, 5
GRADCHECK_TOL = 1e-4
OVERLAY_RADIUS = 20


class GradcheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config + run manifest
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(path: str | None, overrides: dict) -> TrainConfig:
    """YAML file (optional) with command-line overrides applied on top."""
    raw: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: config must be a mapping")
    for key, val in overrides.items():
        if val is None:
            continue
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return TrainConfig.from_dict(raw)


def _overrides(args) -> dict:
    out = {k: getattr(args, k, None) for k in ("epochs", "lr", "seed", "batch_size", "heads", "optimizer")}
    if getattr(args, "scene_blind", False):
        out["scene_blind"] = True
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ManifestError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def write_run_manifest(run_dir: Path, payload: dict) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "run.json"
    tmp = run_dir / "run.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _rel(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# commands; each returns (run_dir, manifest payload)
# ---------------------------------------------------------------------------

def cmd_synth(args) -> tuple[Path, dict]:
    out = Path(args.out)
    if args.n < 1:
        raise ManifestError("--n must be >= 1")
    cfg = SynthConfig(samples_per_driver=args.per_driver, scene_size=_size(args.scene_size))
    samples = generate_synthetic(args.seed, args.n, cfg)
    manifest = write_dataset(samples, out)
    recs = [r for r, _ in samples]
    drivers = sorted({r.driver_id for r in recs})
    one = sum((r.iris_centers["left"] is None) != (r.iris_centers["right"] is None) for r in recs)
    both = sum(r.iris_centers["left"] is None and r.iris_centers["right"] is None for r in recs)
    print(f"wrote {len(recs)} samples from {len(drivers)} drivers to {out}")
    print(f"one iris invalid: {one}  both invalid: {both}")
    return out, {
        "config": {"n": args.n, "per_driver": args.per_driver, "synth": _jsonable(cfg.__dict__)},
        "seed": args.seed,
        "artifacts": {"manifest": _rel(manifest, out)},
    }


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ManifestError(f"size must look like WxH, got {text!r}") from None
    if w < 8 or h < 8:
        raise ManifestError(f"size {text!r} too small")
    return w, h


def _split(records: list[SampleRecord], cfg: TrainConfig):
    return split_by_driver(records, cfg.split_ratios, cfg.split_seed)


def cmd_train(args) -> tuple[Path, dict]:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    ckpt_path = Path(args.out)
    run_dir = ckpt_path.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest)
    params = optimizer = None
    start = 0
    prior_curve: list[dict] = []
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = replace(ck.config, **{k: v for k, v in _overrides(args).items() if v is not None})
        params = ck.params
        optimizer = make_optimizer(cfg)
        optimizer.load(ck.optimizer_meta, ck.optimizer_arrays)
        start = int(ck.header.get("epoch", -1)) + 1
        prior_curve = ck.header.get("loss_curve", [])
    else:
        cfg = load_config(args.config, _overrides(args))
    tr, va, te = _split(records, cfg)
    if not tr:
        raise ManifestError("training split is empty")
    t0 = time.perf_counter()
    train_s = prepare_records(tr, manifest.parent, cfg)
    val_s = prepare_records(va, manifest.parent, cfg) if va else None
    if params is None:
        params = init_training_params(cfg)
    result = train(train_s, cfg, val_s, params=params, optimizer=optimizer, start_epoch=start)
    curve = prior_curve + result.curve
    split = {
        "train_drivers": sorted({r.driver_id for r in tr}),
        "val_drivers": sorted({r.driver_id for r in va}),
        "test_drivers": sorted({r.driver_id for r in te}),
    }
    save_checkpoint(ckpt_path, result.params, cfg, result.optimizer,
                    extra={"epoch": cfg.epochs - 1, "loss_curve": curve, **split})
    loss_csv = run_dir / "loss_curve.csv"
    write_loss_curve(curve, loss_csv)
    last = [r for r in curve if r["split"] == "train"]
    if last:
        print(f"final train loss_dir={last[-1]['loss_dir']:.6f} loss_pog={last[-1]['loss_pog']:.6f}")
    logger.info("training took %.1f s", time.perf_counter() - t0)
    return run_dir, {
        "config_path": args.config,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "artifacts": {"checkpoint": _rel(ckpt_path, run_dir), "loss_curve": _rel(loss_csv, run_dir)},
        **split,
    }


def cmd_eval(args) -> tuple[Path, dict]:
    out = Path(args.out)
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    ck = load_checkpoint(args.ckpt)
    cfg = ck.config
    records = load_manifest(manifest)
    train_drivers = set(ck.header.get("train_drivers", []))
    val_drivers = set(ck.header.get("val_drivers", []))
    if args.split == "test":
        chosen = [r for r in records if r.driver_id not in train_drivers | val_drivers]
    elif args.split == "val":
        chosen = [r for r in records if r.driver_id in val_drivers]
    else:
        chosen = list(records)
    if not chosen:
        raise ManifestError(f"no records for split '{args.split}'")
    samples = prepare_records(chosen, manifest.parent, cfg)
    report = evaluate(samples, ck.params, cfg, train_drivers=sorted(train_drivers))
    paths = report.write(out)
    print(f"MPE {report.mpe:.4f} px  SD {report.sd:.4f}  normalized {report.normalized_error_pct:.2f}%  "
          f"mean normalized error {report.mean_norm_error:.6f}  (n={report.sample_size})")
    return out, {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "checkpoint": str(args.ckpt),
        "split": args.split,
        "artifacts": {p.stem: _rel(p, out) for p in paths},
    }


def draw_circle(img: np.ndarray, center, radius: float, color) -> None:
    """One-pixel ring: pixels whose centre lies within half a pixel of ``radius``."""
    h, w, _ = img.shape
    cx, cy = center
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    img[np.abs(d - radius) < 0.5] = color


def cmd_infer(args) -> tuple[Path, dict]:
    ck = load_checkpoint(args.ckpt)
    cfg = ck.config
    with open(args.annotations, encoding="utf-8") as fh:
        ann = json.load(fh)
    face_u8 = read_image(args.face)
    scene_u8 = read_image(args.scene)
    sh, sw = scene_u8.shape[:2]
    gt = ann.get("gaze_norm")
    rec = SampleRecord.from_json({
        "driver_id": ann.get("driver_id", "infer"),
        "face_path": str(args.face),
        "scene_path": str(args.scene),
        "gaze_norm": gt if gt is not None else (0.5, 0.5),
        "eye_boxes": ann.get("eye_boxes"),
        "iris_centers": ann.get("iris_centers"),
        "face_size": [face_u8.shape[1], face_u8.shape[0]],
        "scene_size": [sw, sh],
    })
    rec.validate()
    sample = prepare_sample(rec, to_chw(face_u8), to_chw(scene_u8), cfg.model)
    if cfg.model.heads == "direction":
        raise ManifestError("checkpoint has no PoG head")
    with ad.no_grad():
        out = forward(ck.params, collate([sample], cfg.np_dtype), cfg.model)
    p = out.pog.p_final.data[0].astype(np.float64)
    result = {
        "pog_norm": [float(p[0]), float(p[1])],
        "pog_px": [float(p[0] * sw), float(p[1] * sh)],
        "direction": None if out.g_hat is None else [float(v) for v in out.g_hat.data[0]],
        "alpha": [float(a) for a in out.pog.alpha.data[0]],
    }
    print(json.dumps(result, sort_keys=True))
    run_dir = Path(args.run_dir)
    artifacts = {}
    if args.overlay:
        img = scene_u8.copy()
        if gt is not None:
            draw_circle(img, (gt[0] * sw, gt[1] * sh), OVERLAY_RADIUS, (0, 255, 0))
        draw_circle(img, result["pog_px"], OVERLAY_RADIUS, (255, 0, 0))
        write_ppm(args.overlay, img)
        artifacts["overlay"] = str(args.overlay)
    return run_dir, {"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": str(args.ckpt),
                     "result": result, "artifacts": artifacts}


def cmd_map_gaze(args) -> tuple[Path, dict]:
    pairs = read_correspondences(args.correspondences)
    if args.ransac:
        h, inliers = estimate_homography_ransac(pairs, args.ransac_threshold, args.ransac_iterations, args.seed)
        print(f"ransac inliers: {int(inliers.sum())}/{len(pairs)}")
    else:
        h = estimate_homography(pairs)
    mean_err, max_err = reprojection_error(h, pairs)
    print(f"reprojection error mean {mean_err:.6g} px  max {max_err:.6g} px")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.gaze, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = list(reader.fieldnames or [])
        if "x" not in cols or "y" not in cols:
            raise ManifestError(f"{args.gaze}: needs columns x,y")
        rows = list(reader)
    mapped = [transform_gaze_chain((float(r["x"]), float(r["y"])), h, args.width, args.height) for r in rows]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["x2", "y2", "in_frame"])
        for row, m in zip(rows, mapped):
            w.writerow([row[c] for c in cols] + [repr(m.x), repr(m.y), int(m.in_frame)])
    sidecar = out.with_suffix(".homography.json")
    sidecar.write_text(h.to_json() + "\n")
    run_dir = out.parent
    return run_dir, {
        "config": {"width": args.width, "height": args.height, "ransac": args.ransac,
                   "ransac_threshold": args.ransac_threshold, "ransac_iterations": args.ransac_iterations},
        "seed": args.seed,
        "reprojection": {"mean": mean_err, "max": max_err},
        "artifacts": {"gaze": _rel(out, run_dir), "homography": _rel(sidecar, run_dir)},
    }


def cmd_gradcheck(args) -> tuple[Path, dict]:
    from .gradcheck import gradcheck_model

    cfg = load_config(args.config, _overrides(args))
    t0 = time.perf_counter()
    if args.corrupt_backward:
        with ad.corrupt_backward(args.corrupt_backward):
            rows = gradcheck_model(cfg, seed=cfg.seed, coords_per_tensor=args.coords)
    else:
        rows = gradcheck_model(cfg, seed=cfg.seed, coords_per_tensor=args.coords)
    width = max(len(r.group) for r in rows)
    print(f"{'group':<{width}}  coords  max_rel_err  status  worst")
    failed = []
    for r in rows:
        ok = r.max_rel_error <= GRADCHECK_TOL
        if not ok:
            failed.append(r.group)
        print(f"{r.group:<{width}}  {r.n_coords:>6}  {r.max_rel_error:11.3e}  {'pass' if ok else 'FAIL':>6}  {r.worst_param}")
    print(f"{len(rows) - len(failed)}/{len(rows)} groups pass (tolerance {GRADCHECK_TOL:g}) in {time.perf_counter() - t0:.1f} s")
    payload = {
        "config_path": args.config,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "groups": [{"group": r.group, "coords": r.n_coords, "max_rel_error": r.max_rel_error,
                    "worst_param": r.worst_param, "kinks": r.n_kinks} for r in rows],
        "artifacts": {},
    }
    if failed:
        raise GradcheckFailed(payload, f"{len(failed)} parameter groups exceed {GRADCHECK_TOL:g}: {', '.join(failed)}")
    return Path(args.run_dir), payload


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=list))


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------

def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--heads", choices=("direction", "pog", "both"))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--scene-blind", action="store_true", help="freeze the attention key projection at zero")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted for nesting)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgap-gaze", description="Scene-aware point-of-gaze estimation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic face/scene dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--per-driver", type=int, default=100, help="samples per synthetic driver")
    p.add_argument("--scene-size", default="256x144", help="scene resolution WxH")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; loss_curve.csv and run.json go next to it")
    p.add_argument("--resume", help="continue from this checkpoint")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out drivers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "val", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict the PoG for one face/scene pair")
    p.add_argument("--face", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--annotations", required=True, help="JSON with eye_boxes, iris_centers and optional gaze_norm")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--overlay", help="write the scene with GT (green) and prediction (red) circles to this PPM")
    p.add_argument("--run-dir", default=".")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("map-gaze", help="map reference-image gaze points into the scene camera")
    p.add_argument("--correspondences", required=True)
    p.add_argument("--gaze", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=float, default=1280)
    p.add_argument("--height", type=float, default=720)
    p.add_argument("--ransac", action="store_true")
    p.add_argument("--ransac-threshold", type=float, default=3.0)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_map_gaze)

    p = sub.add_parser("gradcheck", help="compare backprop against central differences")
    _add_train_overrides(p)
    p.add_argument("--coords", type=int, default=3, help="coordinates sampled per parameter tensor")
    p.add_argument("--run-dir", default=".")
    p.add_argument("--corrupt-backward", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _run_dir_hint(args) -> Path | None:
    if args.command in ("synth", "eval"):
        return Path(args.out)
    if args.command == "train":
        return Path(args.out).parent
    if args.command == "map-gaze":
        return Path(args.out).parent
    return Path(getattr(args, "run_dir", "."))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    base = {"command": args.command}
    payload: dict = {}
    try:
        run_dir, payload = args.func(args)
        status = EXIT_OK
    except GradcheckFailed as e:
        payload, msg = e.args
        print(f"error: {msg}", file=sys.stderr)
        status, run_dir = EXIT_GRADCHECK, _run_dir_hint(args)
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        status, run_dir = EXIT_NUMERIC, _run_dir_hint(args)
    except (SplitContamination, DegeneracyError, InsufficientDataError, HorizonError) as e:
        print(f"error: {e}", file=sys.stderr)
        status, run_dir = EXIT_GEOMETRY, _run_dir_hint(args)
    except (ManifestError, DecodeError, CheckpointCorrupt, CheckpointIncompatible, OSError, ValueError, KeyError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        status, run_dir = EXIT_INPUT, _run_dir_hint(args)
    payload = {**base, **payload, "exit_status": status}
    try:
        write_run_manifest(run_dir, payload)
    except OSError as e:
        print(f"warning: could not write run.json: {e}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
