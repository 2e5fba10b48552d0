"""Hybrid CNN + transformer encoder with a skip-connected upsampling decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import DoubleConv, batch_norm, check_divisible, conv3x3
from .errors import ConfigurationError, InputShapeError

LN_EPS = 1e-6


@dataclass
class TransUNetConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_dim: int = 128
    patch_size: int = 2
    stem_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    decoder_channels: list[int] | None = None
    image_size: int = 64
    in_channels: int = 3
    out_channels: int = 1

    kind = "transunet"

    def __post_init__(self):
        self.stem_channels = list(self.stem_channels)
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads"
            )
        if self.num_layers < 0 or self.patch_size < 1 or not self.stem_channels:
            raise ConfigurationError("invalid transformer geometry")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigurationError("patch_size must be a power of two")
        if self.image_size % self.total_stride:
            raise InputShapeError(
                f"image_size {self.image_size} is not divisible by {self.total_stride}"
            )
        if self.decoder_channels is None:
            # each step takes the width of the stem stage it lands on
            n_up, stem = self.n_upsamplings, self.stem_channels
            self.decoder_channels = [
                stem[n_up - 2 - k] if 0 <= n_up - 2 - k < len(stem) else stem[0]
                for k in range(n_up)
            ]
        self.decoder_channels = list(self.decoder_channels)
        if len(self.decoder_channels) != self.n_upsamplings:
            raise ConfigurationError(
                f"need {self.n_upsamplings} decoder widths, got {len(self.decoder_channels)}"
            )

    @property
    def n_upsamplings(self) -> int:
        return len(self.stem_channels) + int(math.log2(self.patch_size))

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stem_channels) * self.patch_size

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


class CNNStem(nn.Module):
    """Stages of (stride-2 conv, BN, ReLU, conv, BN, ReLU); stage k runs at H/2^k."""

    def __init__(self, in_ch: int, channels):
        super().__init__()
        self.stages = nn.ModuleList()
        for ch in channels:
            self.stages.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, stride=2, padding=1), batch_norm(ch), nn.ReLU(),
                conv3x3(ch, ch), batch_norm(ch), nn.ReLU(),
            ))
            in_ch = ch

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return skips, x


def patchify(plane: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, H*W/P^2, P*P*C), row-major over patches.

    Each token flattens its patch channel-first, matching a PxP stride-P conv kernel layout.
    """
    n, c, h, w = plane.shape
    p = patch_size
    if h % p or w % p:
        raise InputShapeError(f"plane {h}x{w} is not divisible by patch size {p}")
    x = plane.reshape(n, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, patch_size: int, channels: int, grid: tuple[int, int]) -> torch.Tensor:
    n = tokens.shape[0]
    hp, wp = grid
    p = patch_size
    x = tokens.reshape(n, hp, wp, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(n, channels, hp * p, wp * p)


class PatchEmbedding(nn.Module):
    def __init__(self, in_ch: int, patch_size: int, hidden_dim: int, num_tokens: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(in_ch * patch_size * patch_size, hidden_dim)
        self.position = nn.Parameter(torch.zeros(1, num_tokens, hidden_dim))

    def forward(self, plane):
        tokens = self.proj(patchify(plane, self.patch_size))
        if tokens.shape[1] != self.position.shape[1]:
            raise InputShapeError(
                f"model built for {self.position.shape[1]} tokens, input gives {tokens.shape[1]}"
            )
        return tokens + self.position


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        n, t, _ = x.shape
        return x.reshape(n, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x):
        """Returns (output tokens, attention weights of shape (N, heads, T, T))."""
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y), weights


class TransformerBlock(nn.Module):
    """Pre-norm block. The MLP uses ReLU rather than GELU."""

    def __init__(self, dim: int, num_heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))[0]
        return x + self.fc2(F.relu(self.fc1(self.norm2(x))))


class TransformerEncoder(nn.Module):
    def __init__(self, dim: int, num_layers: int, num_heads: int, mlp_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerBlock(dim, num_heads, mlp_dim) for _ in range(num_layers)
        )

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv = DoubleConv(in_ch + skip_ch, out_ch)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class TransUNet(nn.Module):
    """Square inputs of ``config.image_size``; the position table fixes the token count."""

    def __init__(self, config: TransUNetConfig | None = None):
        super().__init__()
        self.config = config = config or TransUNetConfig()
        side = config.image_size // config.total_stride
        self.grid = (side, side)

        self.stem = CNNStem(config.in_channels, config.stem_channels)
        self.embed = PatchEmbedding(config.stem_channels[-1], config.patch_size, config.hidden_dim,
                                    num_tokens=self.grid[0] * self.grid[1])
        self.encoder = TransformerEncoder(config.hidden_dim, config.num_layers,
                                          config.num_heads, config.mlp_dim)
        self.encoder_norm = nn.LayerNorm(config.hidden_dim, eps=LN_EPS)

        dec = config.decoder_channels
        self.conv_more = nn.Sequential(conv3x3(config.hidden_dim, dec[0]), batch_norm(dec[0]), nn.ReLU())
        # decoder step k lands at resolution H / 2^(n_up-1-k); stem stage s lives at H / 2^(s+1)
        n_up = config.n_upsamplings
        self.skip_index = []
        self.decoder = nn.ModuleList()
        prev = dec[0]
        for k in range(n_up):
            level = n_up - 1 - k
            stage = level - 1
            has_skip = 0 <= stage < len(config.stem_channels)
            self.skip_index.append(stage if has_skip else None)
            skip_ch = config.stem_channels[stage] if has_skip else 0
            self.decoder.append(DecoderBlock(prev, skip_ch, dec[k]))
            prev = dec[k]
        self.head = nn.Conv2d(prev, config.out_channels, 1)

    def encode(self, x):
        """Stem skips and post-encoder tokens (before the final layer norm)."""
        check_divisible(x, self.config.total_stride)
        skips, plane = self.stem(x)
        tokens = self.encoder(self.embed(plane))
        return skips, tokens

    def forward(self, x):
        skips, tokens = self.encode(x)
        tokens = self.encoder_norm(tokens)
        n, t, d = tokens.shape
        hp, wp = self.grid
        x = tokens.transpose(1, 2).reshape(n, d, hp, wp)
        x = self.conv_more(x)
        for block, idx in zip(self.decoder, self.skip_index):
            x = block(x, skips[idx] if idx is not None else None)
        return torch.sigmoid(self.head(x))


def full_scale_config() -> TransUNetConfig:
    """Full-size hybrid geometry: ViT-B (768/12 layers/12 heads/3072) over a 16x CNN stem."""
    return TransUNetConfig(
        hidden_dim=768, num_layers=12, num_heads=12, mlp_dim=3072, patch_size=1,
        stem_channels=[64, 256, 512, 1024], decoder_channels=[256, 128, 64, 16],
        image_size=256,
    )
