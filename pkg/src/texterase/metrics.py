"""Image quality metrics and detector-based erasure scoring.

PSNR/SSIM/MSE operate on [0,1] images.  Detector scoring runs any
box-producing callable over erased outputs and reports precision,
recall, and F1 against the original text locations: near-zero values
mean the text is gone.  The bundled detector is a Laplacian-response
connected-component heuristic; scores from it are not comparable to
results produced with trained text detectors.
"""

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import Tensor

from .errors import ConfigurationError

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: Tensor, b: Tensor) -> float:
    """Mean squared error on the [0,1] pixel scale."""
    _check_pair(a, b)
    return float(((a.double() - b.double()) ** 2).mean())


def psnr(a: Tensor, b: Tensor) -> float:
    """10*log10(1/mse) in dB, capped at 100 dB for near-identical images."""
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * float(np.log10(1.0 / m))


def _gaussian1d(window: int, sigma: float, dtype, device) -> Tensor:
    xs = torch.arange(window, dtype=dtype, device=device) - (window - 1) / 2
    g = torch.exp(-(xs**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a: Tensor, b: Tensor, window_size: int = 11, sigma: float = 1.5) -> Tensor:
    """Mean local SSIM over valid Gaussian windows (differentiable).

    11x11 window with sigma 1.5 and stability constants C1=(0.01)^2,
    C2=(0.03)^2; the window shrinks to the largest odd size that fits
    when the images are smaller than 11 pixels.
    """
    _check_pair(a, b)
    if a.dim() != 4:
        raise ConfigurationError("ssim expects [B,C,H,W] tensors")
    h, w = a.shape[-2:]
    win = min(window_size, h, w)
    if win % 2 == 0:
        win -= 1
    c = a.shape[1]
    g = _gaussian1d(win, sigma, a.dtype, a.device)
    col = g.reshape(1, 1, win, 1).repeat(c, 1, 1, 1)
    row = g.reshape(1, 1, 1, win).repeat(c, 1, 1, 1)

    def filt(x):
        return F.conv2d(F.conv2d(x, col, groups=c), row, groups=c)

    mu1, mu2 = filt(a), filt(b)
    var1 = filt(a * a) - mu1 * mu1
    var2 = filt(b * b) - mu2 * mu2
    cov = filt(a * b) - mu1 * mu2
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu1 * mu2 + c1) * (2 * cov + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    return (num / den).mean()


@dataclass
class MetricsReport:
    """Aggregate quality plus detector scores (percent; lower detector
    scores mean better erasure)."""

    psnr: float
    ssim: float
    mse: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)

    def write_text(self, path) -> None:
        lines = [f"{k} = {v:.6f}" for k, v in self.to_dict().items()]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def box_iou(a, b) -> float:
    """IoU of two (x_min, y_min, x_max, y_max) boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def match_boxes(detections, gt_boxes, iou_threshold: float = 0.5) -> int:
    """Greedy one-to-one matching by descending IoU; returns match count."""
    pairs = []
    for i, d in enumerate(detections):
        for j, g in enumerate(gt_boxes):
            iou = box_iou(d, g)
            if iou >= iou_threshold:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_d, used_g = set(), set()
    matched = 0
    for _, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        matched += 1
    return matched


def detector_eval(images, gt_boxes, detector, iou_threshold: float = 0.5):
    """Precision/recall/F1 (percent) of a detector over an image set.

    ``images`` are [H,W,3] arrays (or [3,H,W] tensors) in [0,1];
    ``gt_boxes`` holds one box list per image.  A detector exception
    skips that image; the skip count is logged.
    """
    total_matched = total_det = total_gt = 0
    skipped = 0
    for image, boxes in zip(images, gt_boxes):
        arr = to_hwc(image)
        try:
            dets = detector(arr)
        except Exception as exc:  # noqa: BLE001 - detector is third-party code
            skipped += 1
            log.warning("detector failed on an image (%s); skipping", exc)
            continue
        dets = [d[:4] for d in dets]
        total_matched += match_boxes(dets, list(boxes), iou_threshold)
        total_det += len(dets)
        total_gt += len(boxes)
    if skipped:
        log.warning("detector skipped %d image(s)", skipped)
    precision = 100.0 * total_matched / total_det if total_det else 0.0
    recall = 100.0 * total_matched / total_gt if total_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return precision, recall, f1


def to_hwc(image) -> np.ndarray:
    """Accept [3,H,W] tensors or [H,W,3] arrays; return float32 HWC."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[2] != 3:
        image = np.transpose(image, (1, 2, 0))
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected an RGB image, got shape {image.shape}")
    return image


_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def builtin_text_detector(
    image,
    response_threshold: float = 0.18,
    dilation_iterations: int = 4,
    min_area: int = 40,
    max_area_fraction: float = 0.3,
):
    """Heuristic detector: high Laplacian response -> dilate -> connected
    components -> boxes.  Returns (x_min, y_min, x_max, y_max, score)
    rows.  Meant as a plumbing stand-in, not a trained detector."""
    arr = to_hwc(image)
    gray = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    resp = np.abs(ndimage.convolve(gray.astype(np.float64), _LAPLACIAN, mode="nearest"))
    binary = resp > response_threshold
    if dilation_iterations:
        binary = ndimage.binary_dilation(binary, iterations=dilation_iterations)
    labels, count = ndimage.label(binary)
    if not count:
        return []
    h, w = gray.shape
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        area = (x1 - x0) * (y1 - y0)
        if area < min_area or area > max_area_fraction * h * w:
            continue
        component = labels[sl] == idx
        score = float(resp[sl][component].mean())
        boxes.append((float(x0), float(y0), float(x1), float(y1), score))
    return boxes
