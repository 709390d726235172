"""Generators and discriminators for the two-part erasure network.

Part 1 turns a 256x256 input into a high-pass map, a text segmentation
map, and a coarse text-free image via a pyramid encoder and a
three-branch decoder.  Part 2 upsamples the coarse result to 512x512
conditioned on the segmentation map.  Each part has a patch
discriminator.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .backbone import FeaturePyramid
from .blocks import AttentionFuse, BlockConfig, ConvBlock, PatchDiscriminator, QBlock, SEBlock
from .errors import ConfigurationError


@dataclass
class Part1Output:
    """Predicted high-pass map, segmentation map, and text-free image
    at 256 resolution.  Ablated branches carry None."""

    hp256: Optional[Tensor]
    sp256: Optional[Tensor]
    tfp256: Tensor


@dataclass
class Part2Output:
    """512-resolution text-free images from predicted and from
    ground-truth conditioning."""

    tfp512: Tensor
    tfp512_o: Tensor


class DecoderModule(nn.Module):
    """One decoder step shared by all three branches.

    Per branch: 2x bilinear upsample, concat the encoder skip, 1x1
    fuse conv, Q-block.  The text-free branch is then gated by the
    attention map built from the other two branches.
    """

    def __init__(self, in_dim: int, out_dim: int, skip_dim: int, se_reduction: int = 16):
        super().__init__()
        self.fuse = nn.ModuleList(
            nn.Conv2d(in_dim + skip_dim, out_dim, 1) for _ in range(3)
        )
        self.q = nn.ModuleList(QBlock(out_dim, out_dim, se_reduction) for _ in range(3))
        self.att = AttentionFuse(out_dim, out_dim)

    def forward(self, branches: tuple, skip: Tensor) -> tuple:
        outs = []
        for b, fuse, q in zip(branches, self.fuse, self.q):
            up = F.interpolate(b, scale_factor=2, mode="bilinear", align_corners=False)
            if up.shape[-2:] != skip.shape[-2:]:
                raise ConfigurationError(
                    f"skip extents {tuple(skip.shape[-2:])} do not match "
                    f"upsampled branch extents {tuple(up.shape[-2:])}"
                )
            outs.append(q(fuse(torch.cat([up, skip], dim=1))))
        b1, b2, b3 = outs
        return b1, b2, self.att(b1, b2, b3)


class BranchHead(nn.Module):
    """Final 2x upsample: transpose conv, 1x1 conv, sigmoid."""

    def __init__(self, in_dim: int, width: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_dim, width, 4, stride=2, padding=1)
        self.proj = nn.Conv2d(width, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.proj(self.up(x)))


class FeatureSynthesisGenerator(nn.Module):
    """Part-1 generator: encoder pyramid plus four decoder modules.

    All three branches are seeded from the final pyramid stage through
    independent 1x1 convs and walked up 8 -> 16 -> 32 -> 64 -> 128 with
    skip fusion (the last module reuses the stride-4 skip bilinearly
    resized); heads produce the 256-resolution outputs.

    ``with_highpass``/``with_seg`` drop the corresponding head (the
    branch trunk still feeds the attention gate, so the text-free path
    is unchanged in shape).
    """

    def __init__(
        self,
        backbone: nn.Module,
        decoder_dims: tuple = (128, 64, 32, 16),
        head_width: int = 16,
        se_reduction: int = 16,
        with_highpass: bool = True,
        with_seg: bool = True,
    ):
        super().__init__()
        if len(decoder_dims) != 4:
            raise ConfigurationError("decoder_dims must have 4 entries")
        enc = backbone.channels
        self.backbone = backbone
        self.seeds = nn.ModuleList(nn.Conv2d(enc[3], decoder_dims[0], 1) for _ in range(3))
        skip_dims = (enc[2], enc[1], enc[0], enc[0])
        in_dims = (decoder_dims[0],) + tuple(decoder_dims[:3])
        self.modules_m = nn.ModuleList(
            DecoderModule(in_dims[i], decoder_dims[i], skip_dims[i], se_reduction)
            for i in range(4)
        )
        d4 = decoder_dims[3]
        self.head_h = BranchHead(d4, head_width, 1) if with_highpass else None
        self.head_s = BranchHead(d4, head_width, 1) if with_seg else None
        self.head_tf = BranchHead(d4, head_width, 3)

    def forward(self, t256: Tensor) -> Part1Output:
        if t256.dim() != 4 or t256.shape[1] != 3 or t256.shape[-2:] != (256, 256):
            raise ConfigurationError(
                f"part-1 input must be [B,3,256,256], got {tuple(t256.shape)}"
            )
        pyramid: FeaturePyramid = self.backbone(t256)
        s1, s2, s3, s4 = pyramid.stages
        branches = tuple(seed(s4) for seed in self.seeds)
        skips = [s3, s2, s1, F.interpolate(s1, scale_factor=2, mode="bilinear", align_corners=False)]
        for module, skip in zip(self.modules_m, skips):
            branches = module(branches, skip)
        b1, b2, b3 = branches
        return Part1Output(
            hp256=self.head_h(b1) if self.head_h is not None else None,
            sp256=self.head_s(b2) if self.head_s is not None else None,
            tfp256=self.head_tf(b3),
        )


class MaskImageDiscriminator(nn.Module):
    """Part-1 discriminator: patch logits over (mask, image) pairs."""

    def __init__(self, base_channels: int = 64, patch_layers: int = 4):
        super().__init__()
        self.disc = PatchDiscriminator(
            BlockConfig(4, base_channels, se_reduction=1, patch_layers=patch_layers)
        )

    def forward(self, mask: Tensor, image: Tensor) -> Tensor:
        if mask.shape[0] != image.shape[0] or mask.shape[-2:] != image.shape[-2:]:
            raise ConfigurationError(
                f"mask {tuple(mask.shape)} and image {tuple(image.shape)} disagree"
            )
        if mask.shape[1] != 1 or image.shape[1] != 3:
            raise ConfigurationError("expected a 1-channel mask and a 3-channel image")
        return self.disc(torch.cat([mask, image], dim=1))


class ImagePairDiscriminator(nn.Module):
    """Part-2 discriminator: patch logits over (candidate, reference)."""

    def __init__(self, base_channels: int = 64, patch_layers: int = 4):
        super().__init__()
        self.disc = PatchDiscriminator(
            BlockConfig(6, base_channels, se_reduction=1, patch_layers=patch_layers)
        )

    def forward(self, candidate: Tensor, reference: Tensor) -> Tensor:
        if candidate.shape != reference.shape:
            raise ConfigurationError(
                f"candidate {tuple(candidate.shape)} and reference "
                f"{tuple(reference.shape)} disagree"
            )
        if candidate.shape[1] != 3:
            raise ConfigurationError("expected 3-channel images")
        return self.disc(torch.cat([candidate, reference], dim=1))


class ImageUpscaleGenerator(nn.Module):
    """Part-2 generator: 2x upscale conditioned on a segmentation map.

    concat(seg, image) -> three ConvBlocks with residual skips; a
    squeeze-excitation pass over the first block's output multiplies
    into the third block's output; transpose-conv 2x upsample; residual
    refinement ConvBlocks; 1x1 conv + sigmoid.
    """

    def __init__(
        self,
        width: int = 32,
        up_width: int = 16,
        post_blocks: int = 2,
        se_reduction: int = 16,
    ):
        super().__init__()
        self.cb1 = ConvBlock(4, width)
        self.cb2 = ConvBlock(width, width)
        self.cb3 = ConvBlock(width, width)
        self.se = SEBlock(width, se_reduction)
        self.up = nn.ConvTranspose2d(width, up_width, 4, stride=2, padding=1)
        self.post = nn.Sequential(*(ConvBlock(up_width, up_width) for _ in range(post_blocks)))
        self.proj = nn.Conv2d(up_width, 3, 1)

    def forward(self, seg: Tensor, image: Tensor) -> Tensor:
        if seg.shape[0] != image.shape[0] or seg.shape[-2:] != image.shape[-2:]:
            raise ConfigurationError(
                f"seg {tuple(seg.shape)} and image {tuple(image.shape)} disagree"
            )
        if seg.shape[1] != 1 or image.shape[1] != 3:
            raise ConfigurationError("expected [B,1,H,W] seg and [B,3,H,W] image")
        x = torch.cat([seg, image], dim=1)
        h1 = self.cb1(x)
        h2 = self.cb2(h1) + h1
        h3 = self.cb3(h2) + h2
        fused = h3 * self.se(h1)
        u = self.up(fused)
        p = self.post(u) + u
        return torch.sigmoid(self.proj(p))
