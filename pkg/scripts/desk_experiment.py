"""Desk-scale comparison of the three architectures on synthetic drainage scenes.

Generates a train/validation split, trains each *_desk preset, and reports
the threshold-swept dice/IoU and the patch-grade confusion matrix on the
validation scenes.

    python3 scripts/desk_experiment.py --train 32 --val 8 --epochs 30
"""
import argparse
import logging
import time
from dataclasses import replace

import numpy as np
import torch

from tilemark.data import SynthSceneConfig, synth_dataset
from tilemark.metrics import (
    GRADE_NAMES,
    binarize,
    derive_grade_thresholds,
    grade_mask,
    patch_confusion,
    threshold_sweep,
)
from tilemark.models import predict
from tilemark.training import presets, train

log = logging.getLogger("desk_experiment")


def run(name, train_set, val_set, epochs, seed):
    model_cfg, cfg = presets()[name]
    cfg = replace(cfg, max_epochs=epochs, seed=seed)
    if cfg.schedule.kind == "poly":
        cfg.schedule = replace(cfg.schedule, max_epoch=epochs)
    start = time.perf_counter()
    ckpt, logs = train(model_cfg, train_set, val_set, cfg)
    model = ckpt.build()
    probs = [predict(model, s.image) for s in val_set]
    return ckpt, logs, probs, time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--train", type=int, default=32)
    parser.add_argument("--val", type=int, default=8)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--models", default="basic_unet_desk,improved_unet_desk,transunet_desk")
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)

    base = SynthSceneConfig(size=args.size)
    train_set = synth_dataset(args.train, base, seed=args.seed)
    val_set = synth_dataset(args.val, base, seed=args.seed + 1)
    gts = [s.mask for s in val_set]
    thresholds = derive_grade_thresholds(gts)
    log.info("grade thresholds t1=%.4f t2=%.4f", thresholds.t1, thresholds.t2)

    rows = []
    for name in args.models.split(","):
        ckpt, logs, probs, seconds = run(name, train_set, val_set, args.epochs, args.seed)
        sweep = threshold_sweep(probs, gts)
        cm = patch_confusion(
            [grade_mask(binarize(p, thresholds.pixel_positive_threshold), thresholds) for p in probs],
            [grade_mask(g, thresholds) for g in gts],
        )
        rows.append((name, ckpt.epoch, sweep.dice, sweep.iou, seconds))
        print(f"\n{name}: best epoch {ckpt.epoch}, val loss {ckpt.best_val_loss:.4f}")
        print("confusion (rows = ground truth):")
        print("        " + " ".join(f"{n:>7s}" for n in GRADE_NAMES))
        for n, row in zip(GRADE_NAMES, cm.counts):
            print(f"{n:>7s} " + " ".join(f"{v:7d}" for v in row))
        acc = np.trace(cm.counts) / cm.total
        print(f"patch accuracy {acc:.3f}")

    print(f"\n{'model':22s} {'best':>5s} {'dice':>7s} {'IoU':>7s} {'time':>7s}")
    for name, epoch, dice, iou, seconds in rows:
        print(f"{name:22s} {epoch:5d} {dice:7.4f} {iou:7.4f} {seconds:6.0f}s")


if __name__ == "__main__":
    main()
