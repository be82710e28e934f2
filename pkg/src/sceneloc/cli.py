"""Command-line entry point: ``sceneloc <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .ba_trainer import TrainConfig, train
from .data import Frame, coordinate_centroid, image_statistics, load_dataset, read_intrinsics
from .evaluate import (
    PAPER_ALPHAS,
    GroundTruthPredictor,
    alpha_sweep,
    evaluate,
    export_trajectory,
    localize_frame,
)
from .geometry import Intrinsics, Pose
from .network import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .pnp import RansacConfig
from .synthetic import PALETTES, OracleProviders, load_scene, make_dataset, views_for_frames, write_dataset

log = logging.getLogger("sceneloc")

SPATIAL_DEPTHS = (2, 4, 6)


def _print_seeds(weights: int, data: int):
    print(f"seeds: weights={weights} data={data}", flush=True)


def load_run_config(path) -> dict:
    """YAML run config. Keys: dataset, checkpoint, log, seeds{weights,data},
    network{spatial_depth}, train{TrainConfig fields}, providers{noise_px,
    outlier_rate}."""
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    base = Path(path).parent
    for key in ("dataset", "checkpoint", "log"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = str((base / cfg[key]).resolve()) if not Path(cfg[key]).is_absolute() else cfg[key]
    if "dataset" not in cfg:
        raise ValueError("run config needs a 'dataset' entry")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg.get("train", {})) - known
    if unknown:
        raise ValueError(f"unknown train keys: {sorted(unknown)}")
    return cfg


def run_training(cfg: dict, spatial_depth: int | None = None):
    """Train per a run config dict; returns (model, TrainResult)."""
    seeds = cfg.get("seeds", {})
    w_seed, d_seed = int(seeds.get("weights", 0)), int(seeds.get("data", 0))
    _print_seeds(w_seed, d_seed)
    root = Path(cfg["dataset"])
    frames = load_dataset(root, "train").frames
    scene_path = root / "landmarks.npz"
    if not scene_path.is_file():
        raise FileNotFoundError(f"training needs oracle ground truth: {scene_path} is missing")
    prov = cfg.get("providers", {})
    providers = OracleProviders(views_for_frames(load_scene(scene_path), frames),
                                float(prov.get("noise_px", 0.0)), float(prov.get("outlier_rate", 0.0)), d_seed)
    mean, std = image_statistics(frames)
    depth = spatial_depth if spatial_depth is not None else int(cfg.get("network", {}).get("spatial_depth", 4))
    model = build_network(NetworkConfig(spatial_depth=depth, coordinate_offset=tuple(coordinate_centroid(frames)),
                                        weight_seed=w_seed, image_mean=tuple(mean), image_std=tuple(std)))
    tcfg = TrainConfig(**{**cfg.get("train", {}), "data_seed": d_seed})
    result = train(model, frames, providers, tcfg, log_path=cfg.get("log"))
    if cfg.get("checkpoint"):
        save_checkpoint(model, cfg["checkpoint"], {"train_config": asdict(tcfg), "seeds": [w_seed, d_seed]})
    return model, result


def _ransac(args) -> RansacConfig:
    return RansacConfig(inlier_threshold_px=args.threshold, rng_seed=args.ransac_seed)


def cmd_synth_gen(args):
    _print_seeds(args.seed, args.seed + 1)
    ds = make_dataset(args.seed, args.train, args.test, args.landmarks, args.extent,
                      (args.height, args.width), args.focal, args.palette)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test views to {args.out}")


def cmd_train(args):
    cfg = load_run_config(args.config)
    _, result = run_training(cfg)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"steps": len(result.history), "stopped_early": result.stopped_early,
                      "final_loss": last.get("loss")}))


def _model_or_bypass(args):
    if args.bypass:
        return GroundTruthPredictor()
    if not args.checkpoint:
        raise SystemExit("either --checkpoint or --bypass is required")
    model, _ = load_checkpoint(args.checkpoint)
    return model


def cmd_eval(args):
    ds = load_dataset(args.dataset, args.split)
    report = evaluate(_model_or_bypass(args), ds, args.alpha, _ransac(args))
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.trajectory:
        export_trajectory(report, ds, args.trajectory)
    print(text)


def cmd_localize(args):
    model, _ = load_checkpoint(args.checkpoint)
    k = read_intrinsics(args.intrinsics) if Path(args.intrinsics).is_file() else \
        Intrinsics(*[float(x) for x in args.intrinsics.split(",")])
    frame = Frame(Path(args.image).stem, Path(args.image), Pose.identity(), k)
    pose, diag = localize_frame(model, frame, args.alpha, _ransac(args))
    print(json.dumps({"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist(),
                      "camera_center": pose.camera_center().tolist(), **asdict(diag)}, indent=2))


def cmd_ablate_alpha(args):
    ds = load_dataset(args.dataset, args.split)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(PAPER_ALPHAS)
    rows = alpha_sweep(_model_or_bypass(args), ds, alphas, _ransac(args))
    print("alpha  median_cm  median_deg  mean_survivors  failures")
    for r in rows:
        print(f"{r.alpha:.2f}  {_fmt(r.median_translation_cm)}  {_fmt(r.median_rotation_deg)}  "
              f"{r.mean_survivors:.1f}  {r.failures}")


def cmd_ablate_spatial(args):
    cfg = load_run_config(args.config)
    ds = load_dataset(cfg["dataset"], "test")
    print("spatial_depth  median_cm  median_deg  failures")
    for depth in SPATIAL_DEPTHS:
        run = dict(cfg)
        for key in ("checkpoint", "log"):
            if run.get(key):
                p = Path(run[key])
                run[key] = str(p.with_name(f"{p.stem}-depth{depth}{p.suffix}"))
        model, _ = run_training(run, spatial_depth=depth)
        rep = evaluate(model, ds, run.get("train", {}).get("alpha", 0.8), _ransac(args))
        print(f"{depth}  {_fmt(rep.median_translation_cm)}  {_fmt(rep.median_rotation_deg)}  {rep.failures}",
              flush=True)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def _add_eval_args(p, checkpoint_required=False):
    p.add_argument("--checkpoint", required=checkpoint_required)
    p.add_argument("--bypass", action="store_true", help="use stored ground-truth coordinates instead of a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))


def _add_ransac_args(p):
    p.add_argument("--threshold", type=float, default=10.0, help="RANSAC inlier threshold (px)")
    p.add_argument("--ransac-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sceneloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic scene and write it to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=80)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--landmarks", type=int, default=500)
    p.add_argument("--extent", type=float, default=3.0)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--focal", type=float, default=220.0)
    p.add_argument("--palette", choices=PALETTES, default="random",
                   help="'spatial' ties landmark colour to position")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_eval_args(p)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--out", help="write the report here as well")
    p.add_argument("--trajectory", help="write GT / estimated camera centres here")
    _add_ransac_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="estimate the pose of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--intrinsics", required=True, help="intrinsics.txt or 'fx,fy,cx,cy'")
    p.add_argument("--alpha", type=float, default=0.8)
    _add_ransac_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("ablate-alpha", help="sweep the confidence ratio")
    _add_eval_args(p)
    p.add_argument("--alphas", help="comma separated; default 0.70..0.95 step 0.05")
    _add_ransac_args(p)
    p.set_defaults(func=cmd_ablate_alpha)

    p = sub.add_parser("ablate-spatial", help="train and evaluate spatial depths 2, 4, 6")
    p.add_argument("config")
    _add_ransac_args(p)
    p.set_defaults(func=cmd_ablate_spatial)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.set_printoptions(precision=6)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
