"""Pixel-level and patch-level evaluation.

Pixel level: dice and IoU after binarizing at each of 18 thresholds
(0.10 ... 0.95), averaged per image then over thresholds. Patch level:
masks are reduced to a 3x3 grid of positive-pixel fractions, each cell is
graded none/low/middle/high, and graded grids are compared in a 4x4
confusion matrix.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError

THRESHOLDS = tuple(round(0.10 + 0.05 * k, 2) for k in range(18))
PIXEL_POSITIVE_THRESHOLD = 0.5


class Grade(enum.IntEnum):
    NONE = 0
    LOW = 1
    MIDDLE = 2
    HIGH = 3


GRADE_NAMES = [g.name.lower() for g in Grade]
# 2-bit grayscale levels used when exporting graded grids as images
GRADE_LEVELS = np.array([0, 85, 170, 255], dtype=np.uint8)


def binarize(prob, t: float) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise DomainError(f"threshold {t} outside (0, 1)")
    # float64 so a float32 map is not compared against a float32-rounded threshold
    return (np.asarray(prob, dtype=np.float64) >= t).astype(np.uint8)


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def dice_coefficient(pred, gt) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


@dataclass
class ThresholdSweepResult:
    thresholds: list[float]
    mean_dice: list[float]
    mean_iou: list[float]

    @property
    def dice(self) -> float:
        return float(np.mean(self.mean_dice))

    @property
    def iou(self) -> float:
        return float(np.mean(self.mean_iou))

    def rows(self):
        return list(zip(self.thresholds, self.mean_dice, self.mean_iou))


def threshold_sweep(prob_maps, gts, thresholds=THRESHOLDS) -> ThresholdSweepResult:
    prob_maps, gts = list(prob_maps), list(gts)
    if not prob_maps:
        raise DomainError("threshold sweep needs at least one image")
    if len(prob_maps) != len(gts):
        raise DomainError(f"{len(prob_maps)} predictions vs {len(gts)} masks")
    dices, ious = [], []
    for t in thresholds:
        d = [dice_coefficient(binarize(p, t), g) for p, g in zip(prob_maps, gts)]
        j = [iou(binarize(p, t), g) for p, g in zip(prob_maps, gts)]
        dices.append(float(np.mean(d)))
        ious.append(float(np.mean(j)))
    return ThresholdSweepResult(list(thresholds), dices, ious)


def band_edges(n: int, grid: int = 3) -> list[int]:
    """Split n into ``grid`` contiguous bands, larger bands first (256 -> 86, 85, 85)."""
    base, rem = divmod(n, grid)
    sizes = [base + (1 if k < rem else 0) for k in range(grid)]
    return list(np.cumsum([0] + sizes))


def downscale_to_grid(mask, grid: int = 3) -> np.ndarray:
    """Fraction of positive pixels in each cell of a grid x grid partition."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    if h < grid or w < grid:
        raise DomainError(f"mask {h}x{w} smaller than the {grid}x{grid} grid")
    rows, cols = band_edges(h, grid), band_edges(w, grid)
    out = np.zeros((grid, grid))
    for i in range(grid):
        for j in range(grid):
            cell = mask[rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            out[i, j] = cell.sum() / cell.size
    return out


@dataclass
class GradeThresholds:
    t1: float
    t2: float
    pixel_positive_threshold: float = PIXEL_POSITIVE_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.t1 < self.t2 <= 1.0:
            raise ConfigurationError(f"grade thresholds need 0 < t1 < t2 <= 1, got {self.t1}, {self.t2}")


def derive_grade_thresholds(gt_masks, grid: int = 3) -> GradeThresholds:
    """mean -/+ one (population) std of the nonzero cell fractions of positive masks.

    If mean - std is not a usable lower bound (nonpositive, or std == 0) the
    lower threshold falls back to mean / 2.
    """
    fractions = []
    for m in gt_masks:
        if not np.asarray(m).any():
            continue
        cells = downscale_to_grid(m, grid)
        fractions.extend(cells[cells > 0].ravel().tolist())
    if not fractions:
        raise DomainError("no ground-truth mask contains a positive pixel")
    mu = float(np.mean(fractions))
    sigma = float(np.std(fractions))
    t2 = min(mu + sigma, 1.0)
    t1 = mu - sigma
    if t1 <= 0.0 or t1 >= t2:
        t1 = mu / 2.0
    return GradeThresholds(t1, t2)


@dataclass
class PatchGrid:
    grades: np.ndarray
    fractions: np.ndarray

    def to_image(self) -> np.ndarray:
        return GRADE_LEVELS[self.grades]


def grade_patches(fractions, thresholds: GradeThresholds) -> PatchGrid:
    """none at 0, low in (0, t1], middle in (t1, t2], high above t2."""
    f = np.asarray(fractions, dtype=float)
    if not isinstance(thresholds, GradeThresholds):
        thresholds = GradeThresholds(*thresholds)
    if np.any((f < 0) | (f > 1)):
        raise DomainError("cell fractions must lie in [0, 1]")
    grades = np.full(f.shape, Grade.HIGH, dtype=np.int64)
    grades[f <= thresholds.t2] = Grade.MIDDLE
    grades[f <= thresholds.t1] = Grade.LOW
    grades[f == 0] = Grade.NONE
    return PatchGrid(grades, f)


def grade_mask(mask, thresholds: GradeThresholds, grid: int = 3) -> PatchGrid:
    return grade_patches(downscale_to_grid(mask, grid), thresholds)


@dataclass
class ConfusionMatrix4:
    """Rows: ground-truth grade, columns: predicted grade."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def precision(self) -> dict[str, float | None]:
        col = self.counts.sum(axis=0)
        return {
            name: (float(self.counts[c, c] / col[c]) if col[c] else None)
            for c, name in enumerate(GRADE_NAMES)
        }

    def recall(self) -> dict[str, float | None]:
        row = self.counts.sum(axis=1)
        return {
            name: (float(self.counts[c, c] / row[c]) if row[c] else None)
            for c, name in enumerate(GRADE_NAMES)
        }


def patch_confusion(pred_grids, gt_grids) -> ConfusionMatrix4:
    pred_grids, gt_grids = list(pred_grids), list(gt_grids)
    if len(pred_grids) != len(gt_grids):
        raise DomainError(f"{len(pred_grids)} predicted grids vs {len(gt_grids)} ground-truth grids")
    cm = ConfusionMatrix4()
    for p, g in zip(pred_grids, gt_grids):
        p = p.grades if isinstance(p, PatchGrid) else np.asarray(p)
        g = g.grades if isinstance(g, PatchGrid) else np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"grid shapes differ: {p.shape} vs {g.shape}")
        np.add.at(cm.counts, (g.ravel(), p.ravel()), 1)
    return cm
