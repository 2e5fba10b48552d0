"""Tile-drainage segmentation with an improved U-Net and a TransUNet."""
from .blocks import (
    ASPP,
    AttentionGate,
    BasicUNet,
    BasicUNetConfig,
    ImprovedUNet,
    ImprovedUNetConfig,
    ResidualBlock,
    count_parameters,
)
from .losses import ScheduleSpec, bce_loss, combined_loss, dice_loss, poly_lr, step_lr
from .models import build_model, predict
from .transunet import TransUNet, TransUNetConfig, full_scale_config

__version__ = "0.1.0"
