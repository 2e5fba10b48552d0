"""Convolutional building blocks and the two U-Net variants.

The improved U-Net follows the ResU-Net + ASPP + AG layout: four residual
encoder levels, an ASPP bottleneck, and a decoder whose skip connections are
filtered by attention gates. The basic U-Net is the plain double-conv
baseline it is compared against.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputShapeError

BN_EPS = 1e-5
# torch's running-average momentum is the complement of the Keras-style 0.9
BN_MOMENTUM = 0.1


def conv3x3(in_ch: int, out_ch: int, dilation: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=dilation, dilation=dilation)


def batch_norm(ch: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(ch, eps=BN_EPS, momentum=BN_MOMENTUM)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """He fan-in normal conv/linear kernels, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def count_parameters(module: nn.Module | dict) -> int:
    """Number of trainable scalars. BN running statistics are buffers and never count.

    Accepts a module or a mapping of name -> tensor (treated as all trainable).
    """
    if isinstance(module, dict):
        return sum(int(t.numel()) for t in module.values())
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def check_divisible(x: torch.Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise InputShapeError(
            f"input {h}x{w} is not divisible by {factor}"
        )


class ResidualBlock(nn.Module):
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)), shortcut a 1x1 conv when widths differ."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = conv3x3(in_ch, out_ch)
        self.bn1 = batch_norm(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.bn2 = batch_norm(out_ch)
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ConfigurationError(
                f"residual block expects {self.in_ch} channels, got {x.shape[1]}"
            )
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.shortcut(x))


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(in_ch, out_ch), batch_norm(out_ch), nn.ReLU(),
            conv3x3(out_ch, out_ch), batch_norm(out_ch), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class ASPP(nn.Module):
    """Parallel dilated 3x3 branches, concatenated and fused by a 1x1 conv.

    Padding equals the dilation rate so every branch keeps the input size.
    """

    def __init__(self, in_ch: int, out_ch: int, rates, branch_ch: int | None = None):
        super().__init__()
        rates = list(rates)
        if not rates:
            raise ConfigurationError("ASPP needs at least one dilation rate")
        if any(r < 1 for r in rates):
            raise ConfigurationError(f"dilation rates must be positive, got {rates}")
        branch_ch = branch_ch or out_ch
        self.rates = rates
        self.branches = nn.ModuleList(
            nn.Sequential(conv3x3(in_ch, branch_ch, dilation=r), batch_norm(branch_ch), nn.ReLU())
            for r in rates
        )
        self.fuse = nn.Conv2d(branch_ch * len(rates), out_ch, 1)
        self.fuse_bn = batch_norm(out_ch)

    def forward(self, x):
        y = torch.cat([branch(x) for branch in self.branches], dim=1)
        return F.relu(self.fuse_bn(self.fuse(y)))


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    alpha = sigmoid(psi(relu(W_g g + W_x x))), output alpha * x. The gating
    signal may be at the skip's resolution or one level coarser; in the latter
    case the projected gate is upsampled 2x (nearest).
    """

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int | None = None):
        super().__init__()
        inter_ch = inter_ch or max(1, skip_ch // 2)
        self.w_x = nn.Conv2d(skip_ch, inter_ch, 1)
        self.w_g = nn.Conv2d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def coefficients(self, x_skip, g):
        hx, wx = x_skip.shape[-2:]
        hg, wg = g.shape[-2:]
        gx = self.w_g(g)
        if (hg, wg) == (hx, wx):
            pass
        elif (2 * hg, 2 * wg) == (hx, wx):
            gx = F.interpolate(gx, scale_factor=2, mode="nearest")
        else:
            raise ConfigurationError(
                f"gating signal {hg}x{wg} cannot be matched to skip {hx}x{wx}"
            )
        return torch.sigmoid(self.psi(F.relu(gx + self.w_x(x_skip))))

    def forward(self, x_skip, g):
        return self.coefficients(x_skip, g) * x_skip


class UpConv(nn.Module):
    """Nearest 2x upsampling then 3x3 conv, BN, ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch)
        self.bn = batch_norm(out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.bn(self.conv(x)))


@dataclass
class ImprovedUNetConfig:
    in_channels: int = 3
    out_channels: int = 1
    depth: int = 4
    base_channels: int = 14
    channel_multiplier: int = 2
    aspp_dilation_rates: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    aspp_channels: int | None = None
    use_attention_gates: bool = True
    use_residual_blocks: bool = True

    kind = "improved_unet"

    def __post_init__(self):
        if self.depth != 4:
            raise ConfigurationError("the improved U-Net has exactly 4 levels")
        if self.base_channels < 1 or self.channel_multiplier < 1:
            raise ConfigurationError("channel counts must be positive")
        rates = list(self.aspp_dilation_rates)
        if not rates or rates[0] != 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigurationError(
                f"ASPP rates must be nonempty, strictly increasing and start at 1: {rates}"
            )
        self.aspp_dilation_rates = rates

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * self.channel_multiplier**k for k in range(self.depth)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass
class BasicUNetConfig:
    in_channels: int = 3
    out_channels: int = 1
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])

    kind = "basic_unet"

    def __post_init__(self):
        self.widths = list(self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigurationError(f"bad basic U-Net widths {self.widths}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


class ImprovedUNet(nn.Module):
    def __init__(self, config: ImprovedUNetConfig | None = None):
        super().__init__()
        self.config = config = config or ImprovedUNetConfig()
        widths = config.widths
        block = ResidualBlock if config.use_residual_blocks else DoubleConv

        self.encoder = nn.ModuleList()
        prev = config.in_channels
        for w in widths:
            self.encoder.append(block(prev, w))
            prev = w
        bottleneck = config.aspp_channels or widths[-1]
        self.bottleneck = ASPP(widths[-1], bottleneck, config.aspp_dilation_rates,
                               branch_ch=max(1, bottleneck // len(config.aspp_dilation_rates)))

        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoder = nn.ModuleList()
        prev = bottleneck
        for w in reversed(widths):
            self.ups.append(UpConv(prev, w))
            self.gates.append(AttentionGate(w, prev) if config.use_attention_gates else nn.Identity())
            self.decoder.append(block(2 * w, w))
            prev = w
        self.head = nn.Conv2d(widths[0], config.out_channels, 1)

    def forward(self, x):
        check_divisible(x, 2 ** self.config.depth)
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, gate, dec, skip in zip(self.ups, self.gates, self.decoder, reversed(skips)):
            g = x
            x = up(x)
            if self.config.use_attention_gates:
                skip = gate(skip, g)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


class BasicUNet(nn.Module):
    """Plain U-Net: double convs, max-pool down, nearest-up + conv, concatenated skips."""

    def __init__(self, config: BasicUNetConfig | None = None):
        super().__init__()
        self.config = config = config or BasicUNetConfig()
        widths = config.widths
        self.encoder = nn.ModuleList()
        prev = config.in_channels
        for w in widths:
            self.encoder.append(DoubleConv(prev, w))
            prev = w
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.ups.append(UpConv(prev, w))
            self.decoder.append(DoubleConv(2 * w, w))
            prev = w
        self.head = nn.Conv2d(widths[0], config.out_channels, 1)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.config.widths) - 1)

    def forward(self, x):
        check_divisible(x, self.downsampling)
        skips = []
        for enc in self.encoder[:-1]:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.encoder[-1](x)
        for up, dec, skip in zip(self.ups, self.decoder, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        return torch.sigmoid(self.head(x))
