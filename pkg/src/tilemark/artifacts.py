"""On-disk formats for predictions and evaluation reports."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, ShapeError
from .metrics import GRADE_NAMES, ConfusionMatrix4, ThresholdSweepResult

RAW_MAGIC = b"DPRED1"


def quantize(prob: np.ndarray) -> np.ndarray:
    """round(255 p) with halves rounded up (0.5 -> 128)."""
    return np.floor(np.asarray(prob, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def write_raw(prob: np.ndarray, path) -> None:
    """Magic "DPRED1", u32 H, u32 W, then row-major little-endian f32."""
    prob = np.asarray(prob, dtype="<f4")
    if prob.ndim != 2:
        raise ShapeError("raw predictions are single H x W maps")
    h, w = prob.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<II", h, w) + prob.tobytes())


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:6] != RAW_MAGIC or len(buf) < 14:
        raise DomainError(f"{path} is not a raw prediction file")
    h, w = struct.unpack("<II", buf[6:14])
    if len(buf) != 14 + 4 * h * w:
        raise DomainError(f"{path} has the wrong payload size for {h}x{w}")
    return np.frombuffer(buf[14:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_prediction(prob: np.ndarray, out_dir, sample_id: str, raw: bool = True) -> None:
    out_dir = Path(out_dir)
    Image.fromarray(quantize(prob), mode="L").save(out_dir / f"{sample_id}.png")
    if raw:
        write_raw(prob, out_dir / f"{sample_id}.dpred")


def read_predictions(directory) -> dict[str, np.ndarray]:
    """id -> probability map; a raw sidecar wins over its PNG."""
    directory = Path(directory)
    out = {}
    for p in sorted(directory.glob("*.png")):
        out[p.stem] = np.asarray(Image.open(p).convert("L"), dtype=np.float32) / 255.0
    for p in sorted(directory.glob("*.dpred")):
        out[p.stem] = read_raw(p)
    return out


def read_masks(directory) -> dict[str, np.ndarray]:
    """Ground-truth masks from ``<dir>/masks`` or ``<dir>`` itself, binarized at >= 128."""
    directory = Path(directory)
    if (directory / "masks").is_dir():
        directory = directory / "masks"
    return {
        p.stem: (np.asarray(Image.open(p).convert("L")) >= 128).astype(np.uint8)
        for p in sorted(directory.glob("*.png"))
    }


def write_sweep_csv(result: ThresholdSweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "mean_dice", "mean_iou"])
        for t, d, j in result.rows():
            w.writerow([f"{t:.2f}", repr(d), repr(j)])
        w.writerow(["mean", repr(result.dice), repr(result.iou)])


def read_sweep_csv(path) -> ThresholdSweepResult:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    body = [r for r in rows if r["threshold"] != "mean"]
    return ThresholdSweepResult(
        [float(r["threshold"]) for r in body],
        [float(r["mean_dice"]) for r in body],
        [float(r["mean_iou"]) for r in body],
    )


def _fmt(x):
    return "" if x is None else repr(x)


def write_patch_report(cm: ConfusionMatrix4, thresholds, path) -> None:
    """Confusion counts (rows = ground truth) then per-class precision/recall.

    Undefined ratios are written as empty fields.
    """
    precision, recall = cm.precision(), cm.recall()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "class", *GRADE_NAMES])
        for name, row in zip(GRADE_NAMES, cm.counts):
            w.writerow(["confusion", name, *[int(v) for v in row]])
        w.writerow(["precision", "", *[_fmt(precision[n]) for n in GRADE_NAMES]])
        w.writerow(["recall", "", *[_fmt(recall[n]) for n in GRADE_NAMES]])
        w.writerow(["thresholds", "", repr(thresholds.t1), repr(thresholds.t2),
                    repr(thresholds.pixel_positive_threshold), ""])


def read_patch_report(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    counts = np.array([[int(v) for v in r[2:]] for r in rows if r[0] == "confusion"])

    def ratios(section):
        r = next(r for r in rows if r[0] == section)
        return {n: (float(v) if v else None) for n, v in zip(GRADE_NAMES, r[2:])}

    t = next(r for r in rows if r[0] == "thresholds")
    return {
        "confusion": counts,
        "precision": ratios("precision"),
        "recall": ratios("recall"),
        "thresholds": (float(t[2]), float(t[3])),
    }


def patch_report_path(report_path) -> Path:
    p = Path(report_path)
    return p.with_name(p.stem + "_patches.csv")


