"""Command line: ``tilemark synth|train|predict|eval``.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import artifacts
from .config import RunConfig, preset_config
from .data import SynthSceneConfig, expand_training_set, load_dataset, save_dataset, synth_dataset
from .errors import InputShapeError, NumericalError, TilemarkError
from .metrics import (
    GradeThresholds,
    binarize,
    derive_grade_thresholds,
    grade_mask,
    patch_confusion,
    threshold_sweep,
)
from .models import predict
from .training import load_checkpoint, save_checkpoint, train, write_log_csv

log = logging.getLogger("tilemark")


class UsageError(TilemarkError):
    pass


def _set_threads():
    n = os.environ.get("TILEMARK_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    base = SynthSceneConfig(
        size=args.size, pattern=args.pattern, line_spacing=args.spacing, line_width=args.width,
        orientation=args.orientation if args.orientation is not None else 0.0,
        line_brightness_gain=args.gain, background_noise_scale=args.noise,
        n_confounder_roads=args.roads,
    )
    samples = synth_dataset(args.count, base, seed=args.seed, randomize=args.orientation is None)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


# ---------------------------------------------------------------- train

def _split(samples, fraction):
    n_val = max(1, math.ceil(fraction * len(samples)))
    if n_val >= len(samples):
        raise UsageError("dataset too small to hold out a validation split")
    return samples[:-n_val], samples[-n_val:]


def cmd_train(args) -> int:
    run = RunConfig.from_file(args.config) if args.config else preset_config(args.preset)
    model_cfg, train_cfg, data_opts, _ = run.resolve()
    if args.seed is not None:
        train_cfg.seed = args.seed
    samples = load_dataset(args.data)
    if args.val:
        train_set, val_set = samples, load_dataset(args.val)
    else:
        train_set, val_set = _split(samples, data_opts.val_fraction)
    if data_opts.augment_factor > 1:
        train_set = expand_training_set(train_set, data_opts.augment_factor, data_opts.augment_seed)

    ckpt, logs = train(model_cfg, train_set, val_set, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    write_log_csv(logs, out.parent / "train_log.csv")
    print(f"best epoch {ckpt.epoch} val loss {ckpt.best_val_loss:.6f}; checkpoint {out}")
    return 0


# ---------------------------------------------------------------- predict

def _read_images(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    if (directory / "images").is_dir():
        directory = directory / "images"
    if not directory.is_dir():
        raise UsageError(f"no image directory at {directory}")
    return {p.stem: np.asarray(Image.open(p).convert("RGB")) for p in sorted(directory.glob("*.png"))}


def cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt).build()
    images = _read_images(args.images)
    preds, bad = {}, []
    for sid, image in images.items():
        try:
            preds[sid] = predict(model, image)
        except InputShapeError:
            bad.append(sid)
    if bad:
        raise UsageError(f"image size incompatible with the checkpoint: {', '.join(bad)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, prob in preds.items():
        artifacts.write_prediction(prob, out, sid, raw=not args.no_raw)
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


# ---------------------------------------------------------------- eval

def _parse_thresholds(text):
    try:
        t1, t2 = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected t1,t2") from None
    return t1, t2


def cmd_eval(args) -> int:
    preds = artifacts.read_predictions(args.pred)
    gts = artifacts.read_masks(args.gt)
    if not gts:
        raise UsageError(f"no ground-truth masks under {args.gt}")
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise UsageError(f"unmatched ids: {', '.join(unmatched)}")
    ids = sorted(gts)
    for i in ids:
        if preds[i].shape != gts[i].shape:
            raise UsageError(f"{i}: prediction {preds[i].shape} vs mask {gts[i].shape}")

    sweep = threshold_sweep([preds[i] for i in ids], [gts[i] for i in ids])
    artifacts.write_sweep_csv(sweep, args.report)

    if args.grade_thresholds:
        thresholds = GradeThresholds(*args.grade_thresholds, args.pixel_threshold)
    else:
        derived = derive_grade_thresholds([gts[i] for i in ids])
        thresholds = GradeThresholds(derived.t1, derived.t2, args.pixel_threshold)
        print(f"derived grade thresholds t1={thresholds.t1:.6f} t2={thresholds.t2:.6f}")
    pred_grids = [grade_mask(binarize(preds[i], thresholds.pixel_positive_threshold), thresholds)
                  for i in ids]
    gt_grids = [grade_mask(gts[i], thresholds) for i in ids]
    cm = patch_confusion(pred_grids, gt_grids)
    artifacts.write_patch_report(cm, thresholds, artifacts.patch_report_path(args.report))

    if args.grid_images:
        out = Path(args.grid_images)
        out.mkdir(parents=True, exist_ok=True)
        for i, pg, gg in zip(ids, pred_grids, gt_grids):
            Image.fromarray(pg.to_image(), mode="L").save(out / f"{i}_pred.png")
            Image.fromarray(gg.to_image(), mode="L").save(out / f"{i}_gt.png")

    print(f"mean dice {sweep.dice:.4f}  mean IoU {sweep.iou:.4f}  over {len(ids)} images")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilemark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic drainage scenes in the dataset layout")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pattern", choices=["parallel", "herringbone"], default="parallel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, default=16.0)
    p.add_argument("--width", type=float, default=2.0)
    p.add_argument("--orientation", type=float, default=None,
                   help="fixed line orientation in degrees (default: random per scene)")
    p.add_argument("--gain", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=12.0)
    p.add_argument("--roads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus train_log.csv")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--preset")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="separate validation dataset (default: split --data)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write probability maps as PNG and raw .dpred files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-raw", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="threshold-swept dice/IoU and 3x3 patch grading")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--grade-thresholds", type=_parse_thresholds)
    p.add_argument("--pixel-threshold", type=float, default=0.5)
    p.add_argument("--grid-images")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TilemarkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
