"""Training losses for both parts of the network.

All pixel losses reduce by per-element mean so magnitudes are
independent of batch and image size.  Adversarial terms use the
numerically stable non-saturating logistic form on raw logits:
softplus(-x) for "should be real", softplus(x) for "should be fake".
"""

from dataclasses import dataclass, asdict
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError
from .metrics import ssim

CLAMP_EPS = 1e-7


@dataclass
class LossWeights:
    """Multiplier per loss term; defaults reproduce the unweighted sum."""

    gan_g1: float = 1.0
    h: float = 1.0
    s: float = 1.0
    tf: float = 1.0
    g2_adv: float = 1.0
    g2_l1_pred: float = 1.0
    g2_l1_gtcond: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    """Per-step scalar breakdown; ablated terms are None and omitted
    from the dict form."""

    h_loss: Optional[float] = None
    s_loss: Optional[float] = None
    tf_loss: Optional[float] = None
    gan_g1: Optional[float] = None
    gan_d1: Optional[float] = None
    g1_total: Optional[float] = None
    g2_adv: Optional[float] = None
    g2_l1_pred: Optional[float] = None
    g2_l1_gtcond: Optional[float] = None
    g2_total: Optional[float] = None
    d2_loss: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def h_loss(hg: Tensor, hp: Tensor) -> Tensor:
    """Mean absolute error between high-pass maps."""
    _check_pair(hg, hp)
    return (hg - hp).abs().mean()


def s_loss(sg: Tensor, sp: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """Segmentation loss: L1 + binary cross-entropy + smooth dice.

    The dice term is 1 - (2*sum(sg*sp) + eps) / (sum(sg^2) + sum(sp^2)
    + eps); the eps in both numerator and denominator makes the
    empty-vs-empty case come out to zero.  Probabilities are clamped to
    [eps, 1-eps] before the log terms.
    """
    _check_pair(sg, sp)
    if float(sp.detach().min()) < 0.0 or float(sp.detach().max()) > 1.0:
        raise ConfigurationError("predicted mask values must lie in [0,1]")
    l1 = (sg - sp).abs().mean()
    spc = sp.clamp(eps, 1.0 - eps)
    bce = -(sg * spc.log() + (1.0 - sg) * (1.0 - spc).log()).mean()
    inter = (sg * sp).sum()
    denom = (sg * sg).sum() + (sp * sp).sum()
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return l1 + bce + dice


def tf_loss(tfg: Tensor, tfp: Tensor) -> Tensor:
    """Text-free image loss: L1 + (1 - SSIM)."""
    _check_pair(tfg, tfp)
    return (tfg - tfp).abs().mean() + (1.0 - ssim(tfp, tfg))


def gan_loss_part1(d1, sg: Tensor, tfg: Tensor, sp: Tensor, tfp: Tensor):
    """Conditional adversarial terms for part 1.

    Returns (g_term, d_term).  The discriminator term scores the real
    pair (sg, tfg) against the detached fake pair; the generator term
    is the non-saturating loss on the live fake pair, so generator
    gradients never touch the real branch.
    """
    d_term = (
        F.softplus(-d1(sg, tfg)).mean()
        + F.softplus(d1(sp.detach(), tfp.detach())).mean()
    )
    g_term = F.softplus(-d1(sp, tfp)).mean()
    return g_term, d_term


def g1_total(
    gan_g1: Optional[Tensor],
    h: Optional[Tensor],
    s: Optional[Tensor],
    tf: Tensor,
    weights: LossWeights | None = None,
) -> Tensor:
    """Weighted part-1 generator loss; None terms are skipped."""
    w = weights or LossWeights()
    total = w.tf * tf
    if gan_g1 is not None:
        total = total + w.gan_g1 * gan_g1
    if h is not None:
        total = total + w.h * h
    if s is not None:
        total = total + w.s * s
    return total


def g2_loss_parts(d2, tfp512: Tensor, tfp512_o: Tensor, tfg512: Tensor):
    """Part-2 loss pieces: (adv, l1_pred, l1_gtcond, d_term).

    The discriminator conditions on the ground-truth image as the
    reference: real is (tfg512, tfg512), fakes are both generated
    variants against the same reference.  The generator adversarial
    term covers both fakes.
    """
    _check_pair(tfp512, tfg512)
    _check_pair(tfp512_o, tfg512)
    adv = (
        F.softplus(-d2(tfp512, tfg512)).mean()
        + F.softplus(-d2(tfp512_o, tfg512)).mean()
    )
    l1_pred = (tfg512 - tfp512).abs().mean()
    l1_gtcond = (tfg512 - tfp512_o).abs().mean()
    d_term = (
        F.softplus(-d2(tfg512, tfg512)).mean()
        + F.softplus(d2(tfp512.detach(), tfg512)).mean()
        + F.softplus(d2(tfp512_o.detach(), tfg512)).mean()
    )
    return adv, l1_pred, l1_gtcond, d_term


def g2_total(
    d2,
    tfp512: Tensor,
    tfp512_o: Tensor,
    tfg512: Tensor,
    weights: LossWeights | None = None,
):
    """Weighted part-2 generator and discriminator losses."""
    w = weights or LossWeights()
    adv, l1_pred, l1_gtcond, d_term = g2_loss_parts(d2, tfp512, tfp512_o, tfg512)
    g_term = w.g2_adv * adv + w.g2_l1_pred * l1_pred + w.g2_l1_gtcond * l1_gtcond
    return g_term, d_term
