"""Dataset ingestion and synthetic training-data generation.

A training record pairs an input image with its text-free ground
truth; this module derives everything else the losses need (binary
mask, Laplacian high-pass target, 256-resolution copies) and provides
a seeded text renderer that fabricates fully supervised quadruples
from background images.

Manifest files are line-oriented text with tab-separated fields:

    # texterase-manifest v1
    # split = train
    # seed = 7
    <input>\t<textfree>\t<mask or ->\t<x0,y0,x1,y1;... or ->

Paths are relative to the manifest's directory.  Masks are
single-channel images with 0/255 encoding; boxes live in 512-space.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage
from torch import Tensor

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# texterase-manifest v1"
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_LAPLACIAN_KERNEL = torch.tensor(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]
).reshape(1, 1, 3, 3)


def laplacian_highpass(image: Tensor) -> Tensor:
    """Absolute Laplacian response of the grayscale image, in [0,1].

    Accepts [3,H,W] or [B,3,H,W]; grayscale conversion uses ITU-R 601
    weights, the 3x3 Laplacian uses replicate padding.
    """
    if image.dim() == 3:
        return laplacian_highpass(image.unsqueeze(0)).squeeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise ConfigurationError(f"expected an RGB image, got shape {tuple(image.shape)}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
    gray = (image * w).sum(dim=1, keepdim=True)
    padded = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    kernel = _LAPLACIAN_KERNEL.to(dtype=image.dtype, device=image.device)
    return F.conv2d(padded, kernel).abs().clamp(0.0, 1.0)


def downsample_avg(image: Tensor, factor: int = 2) -> Tensor:
    """Antialiased area-average downsampling."""
    if image.dim() == 3:
        return downsample_avg(image.unsqueeze(0), factor).squeeze(0)
    return F.avg_pool2d(image, kernel_size=factor)


def downsample_mask(mask: Tensor, factor: int = 2) -> Tensor:
    """Binary-preserving mask downsampling (any covered pixel stays on)."""
    if mask.dim() == 3:
        return downsample_mask(mask.unsqueeze(0), factor).squeeze(0)
    return F.max_pool2d(mask, kernel_size=factor)


@dataclass
class TrainingSample:
    """One supervised record at both working resolutions."""

    t512: Tensor
    t256: Tensor
    tfg512: Tensor
    tfg256: Tensor
    sg256: Tensor
    hg256: Tensor
    boxes: np.ndarray


def validate_sample(sample: TrainingSample, synthetic_exact: bool = False) -> None:
    """Raise DataError if a sample violates its invariants."""
    shapes = {
        "t512": (3, 512, 512),
        "t256": (3, 256, 256),
        "tfg512": (3, 512, 512),
        "tfg256": (3, 256, 256),
        "sg256": (1, 256, 256),
        "hg256": (1, 256, 256),
    }
    for name, shape in shapes.items():
        tensor = getattr(sample, name)
        if tuple(tensor.shape) != shape:
            raise DataError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")
        if not torch.isfinite(tensor).all():
            raise DataError(f"{name} contains non-finite values")
        if float(tensor.min()) < 0.0 or float(tensor.max()) > 1.0:
            raise DataError(f"{name} values outside [0,1]")
    sg = sample.sg256
    if not torch.logical_or(sg == 0.0, sg == 1.0).all():
        raise DataError("sg256 must be exactly binary")
    if synthetic_exact:
        mask512 = F.interpolate(sample.sg256.unsqueeze(0), scale_factor=2, mode="nearest")[0, 0]
        dilated = ndimage.binary_dilation(mask512.numpy() > 0.5, iterations=3)
        outside = ~dilated
        diff = (sample.t512 - sample.tfg512).abs().amax(dim=0).numpy()
        if diff[outside].max() > 0:
            raise DataError("input differs from text-free image outside the dilated mask")


@dataclass
class ManifestRecord:
    input_path: str
    textfree_path: str
    mask_path: Optional[str] = None
    boxes: Optional[np.ndarray] = None


@dataclass
class DatasetManifest:
    records: list
    split: str = "train"
    seed: int = 0
    base_dir: Path = field(default_factory=Path)


def _format_boxes(boxes) -> str:
    if boxes is None or len(boxes) == 0:
        return "-"
    return ";".join(",".join(f"{v:.2f}" for v in box[:4]) for box in boxes)


def _parse_boxes(text: str):
    if text == "-":
        return None
    rows = [[float(v) for v in chunk.split(",")] for chunk in text.split(";") if chunk]
    return np.asarray(rows, dtype=np.float32).reshape(-1, 4)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [MANIFEST_HEADER, f"# split = {manifest.split}", f"# seed = {manifest.seed}"]
    for rec in manifest.records:
        lines.append(
            "\t".join(
                [
                    rec.input_path,
                    rec.textfree_path,
                    rec.mask_path or "-",
                    _format_boxes(rec.boxes),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    split, seed = "train", 0
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, _, value = body.partition("=")
                key, value = key.strip(), value.strip()
                if key == "split":
                    split = value
                elif key == "seed":
                    seed = int(value)
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        records.append(
            ManifestRecord(
                input_path=fields[0],
                textfree_path=fields[1],
                mask_path=None if fields[2] == "-" else fields[2],
                boxes=_parse_boxes(fields[3]),
            )
        )
    manifest = DatasetManifest(records, split=split, seed=seed, base_dir=path.parent)
    missing = []
    for rec in manifest.records:
        for rel in (rec.input_path, rec.textfree_path, rec.mask_path):
            if rel is not None and not (manifest.base_dir / rel).exists():
                missing.append(rel)
    if missing:
        raise DataError(f"manifest references missing files: {missing[:5]}")
    return manifest


def _load_image(path, size: Optional[int] = None) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    if size is not None and tensor.shape[-2:] != (size, size):
        log.warning("resizing %s from %s to %dx%d (bilinear)", path, tuple(tensor.shape[-2:]), size, size)
        tensor = F.interpolate(
            tensor.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
        ).squeeze(0)
    return tensor


def rasterize_boxes(boxes, size: int = 512) -> Tensor:
    """Axis-aligned box list -> binary [1,size,size] mask."""
    mask = torch.zeros(1, size, size)
    if boxes is not None:
        for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            xi0, yi0 = max(0, int(round(x0))), max(0, int(round(y0)))
            xi1, yi1 = min(size, int(round(x1))), min(size, int(round(y1)))
            if xi1 > xi0 and yi1 > yi0:
                mask[0, yi0:yi1, xi0:xi1] = 1.0
    return mask


def make_sample(record: ManifestRecord, base_dir=Path("."), target_resolutions=(512, 256)) -> TrainingSample:
    """Load a record and derive every supervised field.

    Inputs are expected at the high resolution; other sizes are
    bilinearly resized with a warning.  The mask comes from the mask
    file when present, otherwise it is rasterized from the boxes.  The
    high-pass target is computed from the text-free ground truth.
    """
    hi, lo = target_resolutions
    if hi % lo:
        raise ConfigurationError(f"resolutions {target_resolutions} must nest")
    factor = hi // lo
    base_dir = Path(base_dir)
    try:
        t_hi = _load_image(base_dir / record.input_path, hi)
        tf_hi = _load_image(base_dir / record.textfree_path, hi)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load record {record.input_path}: {exc}") from exc
    if record.mask_path is not None:
        mask_img = Image.open(base_dir / record.mask_path).convert("L")
        if mask_img.size != (hi, hi):
            mask_img = mask_img.resize((hi, hi), Image.NEAREST)
        mask_hi = torch.from_numpy(
            (np.asarray(mask_img) > 127).astype(np.float32)
        ).unsqueeze(0)
    else:
        mask_hi = rasterize_boxes(record.boxes, hi)
    t_lo = downsample_avg(t_hi, factor)
    tf_lo = downsample_avg(tf_hi, factor)
    sg_lo = downsample_mask(mask_hi, factor)
    boxes = record.boxes if record.boxes is not None else np.zeros((0, 4), dtype=np.float32)
    return TrainingSample(
        t512=t_hi,
        t256=t_lo,
        tfg512=tf_hi,
        tfg256=tf_lo,
        sg256=sg_lo,
        hg256=laplacian_highpass(tf_lo),
        boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
    )


# ---------------------------------------------------------------------------
# Synthetic text rendering
# ---------------------------------------------------------------------------

FONT_ENV_VAR = "TEXTERASE_FONT_DIR"
_FONT_SEARCH_DIRS = ("/usr/share/fonts", os.path.expanduser("~/.fonts"))
_CHARSET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"


def find_fonts() -> list:
    """Sorted TTF/OTF paths from the font search directories."""
    dirs = []
    env_dir = os.environ.get(FONT_ENV_VAR)
    if env_dir:
        dirs.append(env_dir)
    dirs.extend(_FONT_SEARCH_DIRS)
    found = set()
    for root in dirs:
        root_path = Path(root)
        if not root_path.is_dir():
            continue
        for ext in ("*.ttf", "*.otf"):
            found.update(str(p) for p in root_path.rglob(ext))
    if not found:
        raise ConfigurationError(f"no fonts found; searched: {dirs}")
    return sorted(found)


@dataclass
class TextSpec:
    """Bounds for the synthetic text renderer.

    ``min_contrast`` is the smallest luma distance tolerated between a
    text color and the background it lands on; low-contrast draws are
    flipped to the complementary color (0 disables the adjustment).
    """

    min_strings: int = 1
    max_strings: int = 8
    min_size: int = 12
    max_size: int = 72
    max_rotation: float = 45.0
    min_chars: int = 3
    max_chars: int = 10
    min_contrast: float = 0.25

    def __post_init__(self):
        if not (0 <= self.min_strings <= self.max_strings):
            raise ConfigurationError("string counts must satisfy 0 <= min <= max")
        if not (1 <= self.min_size <= self.max_size):
            raise ConfigurationError("sizes must satisfy 1 <= min <= max")


def _render_text_tile(text: str, font_path: str, size: int, angle: float) -> np.ndarray:
    """Rotated antialiased glyph alpha tile, uint8 [h, w]."""
    font = ImageFont.truetype(font_path, size)
    x0, y0, x1, y1 = font.getbbox(text)
    tile = Image.new("L", (max(1, x1 - x0 + 4), max(1, y1 - y0 + 4)), 0)
    ImageDraw.Draw(tile).text((2 - x0, 2 - y0), text, font=font, fill=255)
    rotated = tile.rotate(angle, resample=Image.BILINEAR, expand=True, fillcolor=0)
    bbox = rotated.getbbox()
    if bbox is not None:
        rotated = rotated.crop(bbox)
    return np.asarray(rotated, dtype=np.uint8)


def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]


def synth_render(background, spec: TextSpec, rng: np.random.Generator, size: int = 512):
    """Composite random text onto a background crop.

    Returns (input, text_free, mask, boxes): float32 [H,W,3] images in
    [0,1], a uint8 {0,1} mask where glyph alpha exceeds 0.5, and the
    axis-aligned boxes of each rendered string in pixel coordinates.
    Deterministic given (background, spec, rng state).
    """
    fonts = find_fonts()
    bg = np.asarray(background)
    if bg.dtype == np.uint8:
        bg = bg.astype(np.float64) / 255.0
    else:
        bg = bg.astype(np.float64)
    if bg.ndim != 3 or bg.shape[2] != 3:
        raise ConfigurationError(f"background must be [H,W,3], got {bg.shape}")
    if bg.shape[0] < size or bg.shape[1] < size:
        log.warning("background %s smaller than %d; upscaling", bg.shape[:2], size)
        img = Image.fromarray((bg * 255).round().astype(np.uint8))
        scale = max(size / bg.shape[0], size / bg.shape[1])
        new_size = (int(np.ceil(bg.shape[1] * scale)), int(np.ceil(bg.shape[0] * scale)))
        bg = np.asarray(img.resize(new_size, Image.BILINEAR), dtype=np.float64) / 255.0
    y_off = int(rng.integers(0, bg.shape[0] - size + 1))
    x_off = int(rng.integers(0, bg.shape[1] - size + 1))
    clean = bg[y_off : y_off + size, x_off : x_off + size].copy()

    composited = clean.copy()
    alpha_acc = np.zeros((size, size), dtype=np.float64)
    boxes = []
    for _ in range(int(rng.integers(spec.min_strings, spec.max_strings + 1))):
        n_chars = int(rng.integers(spec.min_chars, spec.max_chars + 1))
        text = "".join(_CHARSET[i] for i in rng.integers(0, len(_CHARSET), n_chars))
        font_path = fonts[int(rng.integers(0, len(fonts)))]
        font_size = int(rng.integers(spec.min_size, spec.max_size + 1))
        angle = float(rng.uniform(-spec.max_rotation, spec.max_rotation))
        tile = _render_text_tile(text, font_path, font_size, angle)
        while max(tile.shape) > size - 16 and font_size > spec.min_size:
            font_size = max(spec.min_size, int(font_size * 0.7))
            tile = _render_text_tile(text, font_path, font_size, angle)
        th, tw = tile.shape
        if th > size - 8 or tw > size - 8:
            continue
        y = int(rng.integers(4, size - th - 3))
        x = int(rng.integers(4, size - tw - 3))
        color = rng.integers(0, 256, 3).astype(np.float64) / 255.0
        alpha = tile.astype(np.float64) / 255.0
        region = composited[y : y + th, x : x + tw]
        covered = alpha > 0.5
        if covered.any() and spec.min_contrast > 0:
            bg_luma = float(_luma(region)[covered].mean())
            color_luma = (
                color[0] * LUMA_WEIGHTS[0] + color[1] * LUMA_WEIGHTS[1] + color[2] * LUMA_WEIGHTS[2]
            )
            if abs(color_luma - bg_luma) < spec.min_contrast:
                color = 1.0 - color
        composited[y : y + th, x : x + tw] = region * (1.0 - alpha[..., None]) + color * alpha[..., None]
        # effective coverage stacks over overlapping strings
        acc = alpha_acc[y : y + th, x : x + tw]
        alpha_acc[y : y + th, x : x + tw] = 1.0 - (1.0 - acc) * (1.0 - alpha)
        ys, xs = np.nonzero(covered)
        if len(ys):
            boxes.append((x + xs.min(), y + ys.min(), x + xs.max() + 1, y + ys.max() + 1))
    mask = (alpha_acc > 0.5).astype(np.uint8)
    boxes_arr = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    return composited.astype(np.float32), clean.astype(np.float32), mask, boxes_arr


def render_background(rng: np.random.Generator, size: int = 768) -> np.ndarray:
    """Smooth synthetic background: color gradient plus low-frequency
    blobs.  Useful for tests and demos; [H,W,3] float32 in [0,1]."""
    c0 = rng.uniform(0.1, 0.9, 3)
    c1 = rng.uniform(0.1, 0.9, 3)
    t = np.linspace(0.0, 1.0, size)
    grad = c0[None, None] * (1 - t[:, None, None]) + c1[None, None] * t[:, None, None]
    coarse = rng.uniform(-1.0, 1.0, (8, 8, 3))
    blobs = np.asarray(
        Image.fromarray(((coarse + 1) * 127.5).astype(np.uint8)).resize((size, size), Image.BILINEAR),
        dtype=np.float64,
    ) / 127.5 - 1.0
    return np.clip(grad + 0.12 * blobs, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Batch loading
# ---------------------------------------------------------------------------


def collate(samples) -> dict:
    """Stack samples into 4-axis batches; boxes stay a ragged list."""
    batch = {}
    for key in ("t512", "t256", "tfg512", "tfg256", "sg256", "hg256"):
        batch[key] = torch.stack([getattr(s, key) for s in samples])
    batch["boxes"] = [s.boxes for s in samples]
    return batch


class DatasetLoader:
    """Deterministic shuffled batch access over a manifest.

    Batch composition depends only on (manifest, seed): epoch ``e``
    uses a permutation seeded by (seed, e) cut into consecutive chunks,
    so any global batch index can be replayed exactly.  Decoded samples
    are cached up to ``cache_size`` records.
    """

    def __init__(self, manifest: DatasetManifest, batch_size: int, shuffle_seed: int = 0, cache_size: int = 64):
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not manifest.records:
            raise DataError("manifest has no records")
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = shuffle_seed
        self.cache_size = cache_size
        self._cache = {}
        self._bad = set()

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self) // self.batch_size)

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self))

    def batch_record_indices(self, global_batch: int):
        epoch, offset = divmod(global_batch, self.batches_per_epoch)
        order = self.epoch_order(epoch)
        start = offset * self.batch_size
        return [int(i) for i in order[start : start + self.batch_size]]

    def _sample(self, index: int):
        if index in self._cache:
            return self._cache[index]
        if index in self._bad:
            return None
        try:
            sample = make_sample(self.manifest.records[index], self.manifest.base_dir)
        except DataError as exc:
            self._bad.add(index)
            log.warning("skipping record %d: %s", index, exc)
            if len(self._bad) / len(self) > 0.05:
                raise DataError(
                    f"{len(self._bad)} of {len(self)} records unreadable (>5%)"
                ) from exc
            return None
        if len(self._cache) < self.cache_size:
            self._cache[index] = sample
        return sample

    def load_batch(self, global_batch: int) -> dict:
        samples = [self._sample(i) for i in self.batch_record_indices(global_batch)]
        samples = [s for s in samples if s is not None]
        if not samples:
            raise DataError(f"batch {global_batch} had no loadable records")
        return collate(samples)

    def iter_epoch(self, epoch: int = 0):
        for b in range(self.batches_per_epoch):
            yield self.load_batch(epoch * self.batches_per_epoch + b)


def load_dataset(manifest: DatasetManifest, batch_size: int, shuffle_seed: int = 0) -> DatasetLoader:
    """Convenience constructor for DatasetLoader."""
    return DatasetLoader(manifest, batch_size, shuffle_seed)


def audit_dataset(manifest: DatasetManifest, synthetic_exact: bool = True):
    """Validate every record's TrainingSample invariants.

    Returns (checked_count, list of (record index, message)) without
    raising, so callers can report all problems at once.
    """
    problems = []
    checked = 0
    for i, record in enumerate(manifest.records):
        try:
            sample = make_sample(record, manifest.base_dir)
            validate_sample(sample, synthetic_exact=synthetic_exact)
            checked += 1
        except (DataError, ConfigurationError) as exc:
            problems.append((i, str(exc)))
    return checked, problems
