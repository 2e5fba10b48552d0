"""Model registry: build any of the three networks from a config, seeded."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .blocks import BasicUNet, BasicUNetConfig, ImprovedUNet, ImprovedUNetConfig, init_weights
from .errors import ConfigurationError
from .transunet import TransUNet, TransUNetConfig

CONFIGS = {
    "basic_unet": BasicUNetConfig,
    "improved_unet": ImprovedUNetConfig,
    "transunet": TransUNetConfig,
}
MODELS = {
    "basic_unet": BasicUNet,
    "improved_unet": ImprovedUNet,
    "transunet": TransUNet,
}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in CONFIGS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    try:
        return CONFIGS[kind](**d)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def build_model(config, seed: int = 0, dtype=torch.float32) -> nn.Module:
    if isinstance(config, dict):
        config = config_from_dict(config)
    model = MODELS[config.kind](config)
    gen = torch.Generator().manual_seed(seed)
    init_weights(model, gen)
    return model.to(dtype)


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x C uint8 -> 1 x C x H x W in [0, 1]."""
    if image.ndim == 2:
        image = image[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype) / 255.0
    return t.unsqueeze(0)


@torch.no_grad()
def predict(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """Probability map (H x W float32) for one H x W x C image."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(image_to_tensor(image, dtype))
    return out[0, 0].to(torch.float32).numpy()
