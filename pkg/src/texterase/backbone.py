"""Multi-scale feature backbone.

A configurable pyramid vision transformer built from scratch: four
stages of patch embedding plus transformer blocks with spatially
reduced attention, emitting feature maps at strides 4/8/16/32.  A
plain convolutional pyramid with the same interface is provided as an
alternative, and further backbones can be registered by name.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    """Sizing of the four pyramid stages.

    Defaults are deliberately small so the full model trains on a
    desktop; bump ``embed_dims``/``depths`` for larger variants.
    """

    embed_dims: tuple = (32, 64, 128, 256)
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    mlp_ratio: int = 4
    variant: str = "pvt"

    def __post_init__(self):
        for name in ("embed_dims", "depths", "heads", "sr_ratios"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 4:
                raise ConfigurationError(f"{name} must have 4 entries, got {value}")
            if any(v < 1 for v in value):
                raise ConfigurationError(f"{name} entries must be positive: {value}")
        for dim, h in zip(self.embed_dims, self.heads):
            if dim % h:
                raise ConfigurationError(
                    f"embed dim {dim} not divisible by head count {h}"
                )


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4, 8, 16, 32 of the input."""

    stages: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigurationError(f"expected 4 stages, got {len(self.stages)}")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if (prev.shape[2] != 2 * cur.shape[2]) or (prev.shape[3] != 2 * cur.shape[3]):
                raise ConfigurationError(
                    "each stage must halve the previous stage's spatial extents"
                )

    @property
    def channels(self) -> tuple:
        return tuple(s.shape[1] for s in self.stages)


class SRAttention(nn.Module):
    """Multi-head self-attention with spatially reduced keys/values.

    Queries come from every token; keys and values come from the token
    grid average-pooled by ``sr_ratio``, so sr_ratio 1 is exactly
    standard multi-head self-attention.
    """

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        if sr_ratio < 1:
            raise ConfigurationError("sr_ratio must be positive")
        self.dim = dim
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, hw: tuple, return_weights: bool = False):
        b, n, c = x.shape
        h, w = hw
        if h * w != n:
            raise ConfigurationError(f"{n} tokens do not form a {h}x{w} grid")
        sr = self.sr_ratio
        if sr > 1:
            if h % sr or w % sr:
                raise ConfigurationError(f"grid {h}x{w} not divisible by sr_ratio {sr}")
            grid = x.transpose(1, 2).reshape(b, c, h, w)
            pooled = F.avg_pool2d(grid, kernel_size=sr, stride=sr)
            kv = pooled.flatten(2).transpose(1, 2)
        else:
            kv = x
        m = kv.shape[1]
        dh = c // self.heads
        q = self.q(x).reshape(b, n, self.heads, dh).transpose(1, 2)
        k = self.k(kv).reshape(b, m, self.heads, dh).transpose(1, 2)
        v = self.v(kv).reshape(b, m, self.heads, dh).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: SRA attention + MLP, both residual."""

    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SRAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        hidden = dim * mlp_ratio
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor, hw: tuple) -> Tensor:
        x = x + self.attn(self.norm1(x), hw)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Non-overlapping patch aggregation: strided conv + layer norm."""

    def __init__(self, in_channels: int, dim: int, patch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor):
        x = self.proj(x)
        h, w = x.shape[2], x.shape[3]
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        return tokens, (h, w)


class _Stage(nn.Module):
    def __init__(self, in_channels, dim, patch, depth, heads, sr, mlp_ratio, base_grid):
        super().__init__()
        self.embed = PatchEmbed(in_channels, dim, patch)
        self.base_grid = base_grid
        self.pos = nn.Parameter(torch.zeros(1, base_grid * base_grid, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, sr, mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def pos_for(self, hw: tuple) -> Tensor:
        h, w = hw
        if (h, w) == (self.base_grid, self.base_grid):
            return self.pos
        g = self.base_grid
        grid = self.pos.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return grid.flatten(2).transpose(1, 2)

    def forward(self, x: Tensor) -> Tensor:
        tokens, hw = self.embed(x)
        tokens = tokens + self.pos_for(hw)
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        tokens = self.norm(tokens)
        b, n, c = tokens.shape
        return tokens.transpose(1, 2).reshape(b, c, *hw)


class PyramidTransformer(nn.Module):
    """Four-stage pyramid vision transformer.

    Position embeddings are learned at the 256-input token grids and
    bilinearly interpolated for other input sizes, so doubling the
    input doubles every stage.
    """

    base_resolution = 256

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for i in range(4):
            patch = 4 if i == 0 else 2
            base_grid = self.base_resolution // STAGE_STRIDES[i]
            stages.append(
                _Stage(
                    in_ch,
                    cfg.embed_dims[i],
                    patch,
                    cfg.depths[i],
                    cfg.heads[i],
                    cfg.sr_ratios[i],
                    cfg.mlp_ratio,
                    base_grid,
                )
            )
            in_ch = cfg.embed_dims[i]
        self.stages = nn.ModuleList(stages)

    @property
    def channels(self) -> tuple:
        return tuple(self.cfg.embed_dims)

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ConfigurationError("expected an RGB image batch [B,3,H,W]")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ConfigurationError(
                f"input extents {tuple(image.shape[2:])} must be divisible by 32"
            )
        maps = []
        x = image
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return FeaturePyramid(maps)


class ConvPyramidBackbone(nn.Module):
    """Plain convolutional pyramid with the same stage contract.

    Exists to exercise the backbone-swap interface; each stage is a
    strided conv followed by ``depths[i]`` 3x3 refinement convs.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.embed_dims[0], 3, stride=2, padding=1),
            nn.BatchNorm2d(cfg.embed_dims[0]),
            nn.GELU(),
        )
        stages = []
        in_ch = cfg.embed_dims[0]
        for i in range(4):
            dim = cfg.embed_dims[i]
            layers = [nn.Conv2d(in_ch, dim, 3, stride=2, padding=1), nn.BatchNorm2d(dim), nn.GELU()]
            for _ in range(cfg.depths[i]):
                layers += [nn.Conv2d(dim, dim, 3, padding=1), nn.BatchNorm2d(dim), nn.GELU()]
            stages.append(nn.Sequential(*layers))
            in_ch = dim
        self.stages = nn.ModuleList(stages)

    @property
    def channels(self) -> tuple:
        return tuple(self.cfg.embed_dims)

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ConfigurationError("expected an RGB image batch [B,3,H,W]")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ConfigurationError(
                f"input extents {tuple(image.shape[2:])} must be divisible by 32"
            )
        maps = []
        x = self.stem(image)
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return FeaturePyramid(maps)


_BACKBONES = {
    "pvt": PyramidTransformer,
    "cnn": ConvPyramidBackbone,
}


def register_backbone(name: str, factory) -> None:
    """Register a backbone factory: any callable (cfg) -> module whose
    forward maps [B,3,H,W] to a FeaturePyramid qualifies."""
    _BACKBONES[name] = factory


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    try:
        factory = _BACKBONES[cfg.variant]
    except KeyError:
        raise ConfigurationError(
            f"unknown backbone variant {cfg.variant!r}; registered: {sorted(_BACKBONES)}"
        ) from None
    return factory(cfg)


def load_pretrained(path, cfg: BackboneConfig) -> nn.Module:
    """Build the backbone for ``cfg`` and load a weight archive into it.

    Shape-checked tensor by tensor; a partial or mismatched archive is
    rejected without touching the fresh module.
    """
    from .archive import load_module_weights

    backbone = build_backbone(cfg)
    load_module_weights(path, backbone)
    return backbone
