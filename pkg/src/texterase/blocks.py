"""Reusable differentiable building blocks.

ConvBlock, squeeze-excitation gate, the two-route Q-block, the sigmoid
attention fusion unit, and the patch-based discriminator used by both
adversarial heads.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError


@dataclass
class BlockConfig:
    """Channel/layer settings for the blocks in this module.

    ``se_reduction`` must divide ``out_channels``; ``patch_layers`` is the
    number of feature convolutions in the patch discriminator.
    """

    in_channels: int
    out_channels: int
    se_reduction: int = 16
    patch_layers: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.se_reduction < 1 or self.out_channels % self.se_reduction:
            raise ConfigurationError(
                f"se_reduction {self.se_reduction} must divide "
                f"out_channels {self.out_channels}"
            )
        if self.patch_layers < 1:
            raise ConfigurationError("patch_layers must be >= 1")


def _check_channels(x: Tensor, expected: int, who: str) -> None:
    if x.dim() != 4:
        raise ConfigurationError(f"{who}: expected a 4-axis tensor, got {x.dim()} axes")
    if x.shape[1] != expected:
        raise ConfigurationError(
            f"{who}: expected {expected} input channels, got {x.shape[1]}"
        )


class ConvBlock(nn.Module):
    """3x3 convolution (stride 1, padding 1) -> batch norm -> GELU.

    Spatial extents are preserved.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.GELU()

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, "ConvBlock")
        return self.act(self.bn(self.conv(x)))


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate.

    Global average pool -> bottleneck C -> C/r -> ReLU -> C/r -> C ->
    sigmoid, multiplied channel-wise into the input.  The gate lies
    strictly in (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"reduction {reduction} must divide channels {channels}"
            )
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel multiplier in (0, 1), shape [B, C, 1, 1]."""
        _check_channels(x, self.channels, "SEBlock")
        pooled = x.mean(dim=(2, 3))
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        return g.view(x.shape[0], self.channels, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class QBlock(nn.Module):
    """Two-route decoder unit.

    Route 1: 1x1 convolution -> batch norm -> squeeze-excitation.
    Route 2: two ConvBlocks.
    The routes are combined by element-wise sum (residual style), which
    keeps channel counts stable and lets either route be disabled.
    """

    def __init__(self, in_channels: int, out_channels: int, se_reduction: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.shortcut_conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.shortcut_bn = nn.BatchNorm2d(out_channels)
        self.se = SEBlock(out_channels, se_reduction)
        self.body = nn.Sequential(
            ConvBlock(in_channels, out_channels),
            ConvBlock(out_channels, out_channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, "QBlock")
        r1 = self.se(self.shortcut_bn(self.shortcut_conv(x)))
        r2 = self.body(x)
        assert r1.shape == r2.shape, "Q-block routes diverged in shape"
        return r1 + r2


class AttentionFuse(nn.Module):
    """Gate one feature map by an attention map built from two others.

    A = sigmoid(1x1 conv(concat(f1, f2))); output = A * f3.  f1 and f2
    must share channel extents; the conv projects to f3's channels.
    """

    def __init__(self, gate_channels: int, out_channels: int):
        super().__init__()
        self.gate_channels = gate_channels
        self.out_channels = out_channels
        self.conv = nn.Conv2d(2 * gate_channels, out_channels, 1)

    def attention(self, f1: Tensor, f2: Tensor) -> Tensor:
        _check_channels(f1, self.gate_channels, "AttentionFuse")
        _check_channels(f2, self.gate_channels, "AttentionFuse")
        if f1.shape[-2:] != f2.shape[-2:]:
            raise ConfigurationError(
                f"attention inputs disagree spatially: {tuple(f1.shape)} vs {tuple(f2.shape)}"
            )
        return torch.sigmoid(self.conv(torch.cat([f1, f2], dim=1)))

    def forward(self, f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
        a = self.attention(f1, f2)
        if f3.shape[-2:] != f1.shape[-2:]:
            raise ConfigurationError(
                f"gated map disagrees spatially: {tuple(f3.shape)} vs {tuple(f1.shape)}"
            )
        _check_channels(f3, self.out_channels, "AttentionFuse")
        return a * f3


def patch_logit_extent(size: int, layers: int) -> int:
    """Spatial extent of the patch logit map for a square input.

    Mirrors the discriminator layout: layers-1 stride-2 convolutions,
    one stride-1 convolution, and the stride-1 logit projection, all
    4x4 with padding 1.
    """
    s = size
    for _ in range(layers - 1):
        s = (s + 2 - 4) // 2 + 1
    s = s - 1  # stride-1 feature conv
    s = s - 1  # logit projection
    return s


class PatchDiscriminator(nn.Module):
    """Patch-based discriminator emitting a raw logit map.

    Stack of 4x4 convolutions with leaky ReLU (slope 0.2): the first
    ``patch_layers - 1`` use stride 2, the last uses stride 1, followed
    by a stride-1 projection to one logit channel.  Instance norm on all
    feature layers except the first.  No final sigmoid: losses consume
    logits directly.
    """

    def __init__(self, cfg: BlockConfig, norm: str = "instance"):
        super().__init__()
        if norm not in ("instance", "none"):
            raise ConfigurationError(f"unknown discriminator norm: {norm!r}")
        self.cfg = cfg
        layers = []
        nf = cfg.out_channels
        prev = cfg.in_channels
        for i in range(cfg.patch_layers):
            stride = 2 if i < cfg.patch_layers - 1 else 1
            out = min(nf * 2**i, nf * 8)
            layers.append(nn.Conv2d(prev, out, 4, stride=stride, padding=1))
            if i > 0 and norm == "instance":
                layers.append(nn.InstanceNorm2d(out))
            layers.append(nn.LeakyReLU(0.2))
            prev = out
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.in_channels, "PatchDiscriminator")
        h = patch_logit_extent(x.shape[2], self.cfg.patch_layers)
        w = patch_logit_extent(x.shape[3], self.cfg.patch_layers)
        if h < 2 or w < 2:
            raise ConfigurationError(
                f"input {tuple(x.shape[2:])} too small for {self.cfg.patch_layers} "
                "patch layers"
            )
        return self.net(x)
