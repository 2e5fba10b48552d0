"""Segmentation losses and learning-rate schedules.

Losses take probability maps and binary masks as tensors (or arrays) whose
last two dims are H x W; leading dims are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DomainError, ShapeError

BCE_CLAMP = 1e-7
DEFAULT_DICE_EPS = 1.0


def _as_tensors(pred, gt):
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    if not pred.is_floating_point():
        pred = pred.double()
    gt = gt.to(pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs mask {tuple(gt.shape)}")
    if pred.ndim < 2:
        raise ShapeError(f"expected H x W maps, got shape {tuple(pred.shape)}")
    return pred, gt


def dice_loss(pred, gt, eps: float = DEFAULT_DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps), per map, then averaged.

    The additive smoothing keeps the empty/empty case at zero loss and the gradient bounded.
    """
    if eps <= 0:
        raise ConfigurationError(f"dice smoothing must be positive, got {eps}")
    pred, gt = _as_tensors(pred, gt)
    inter = (pred * gt).sum(dim=(-2, -1))
    total = pred.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (total + eps)).mean()


def bce_loss(pred, gt) -> torch.Tensor:
    pred, gt = _as_tensors(pred, gt)
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def combined_loss(pred, gt, eps: float = DEFAULT_DICE_EPS) -> torch.Tensor:
    return 0.5 * dice_loss(pred, gt, eps) + 0.5 * bce_loss(pred, gt)


LOSSES = {"dice": dice_loss, "combined": combined_loss, "bce": bce_loss}


def poly_lr(i: float, max_epoch: int, base: float = 0.01, power: float = 0.9) -> float:
    if max_epoch < 1 or power <= 0:
        raise ConfigurationError("poly schedule needs max_epoch >= 1 and power > 0")
    if not 0 <= i <= max_epoch:
        raise DomainError(f"epoch {i} outside [0, {max_epoch}]")
    return base * (1.0 - i / max_epoch) ** power


def step_lr(epoch: int, initial: float = 0.001, halve_every: int = 16) -> float:
    if halve_every < 1:
        raise ConfigurationError("halve_every must be >= 1")
    if epoch < 0:
        raise DomainError(f"negative epoch {epoch}")
    return initial * 0.5 ** (epoch // halve_every)


@dataclass
class ScheduleSpec:
    kind: str = "step_halving"  # step_halving | poly | constant
    initial_lr: float = 0.001
    halve_every: int = 16
    max_epoch: int = 150
    power: float = 0.9

    def __post_init__(self):
        if self.kind not in ("step_halving", "poly", "constant"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.initial_lr <= 0 or self.max_epoch < 1 or self.power <= 0 or self.halve_every < 1:
            raise ConfigurationError(f"invalid schedule {self}")

    def lr(self, epoch: int) -> float:
        if self.kind == "step_halving":
            return step_lr(epoch, self.initial_lr, self.halve_every)
        if self.kind == "poly":
            return poly_lr(epoch, self.max_epoch, self.initial_lr, self.power)
        return self.initial_lr
