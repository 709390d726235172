"""Joint training of both parts with three optimizers.

Per step: forward part 1 then part 2 on both conditioning variants,
update D1 (RMSprop) on real vs detached fakes, update D2 (Adam)
likewise, then take a single AdamW step over all generator parameters
with gradients flowing from part-2 losses back into part 1.  All three
optimizers follow the same per-step cosine learning rate.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as M
from .archive import load_archive, save_archive
from .backbone import build_backbone
from .config import TrainConfig
from .data import DatasetLoader, DatasetManifest, read_manifest
from .errors import ConfigurationError, TrainingError
from .losses import LossReport, g1_total, h_loss, s_loss, tf_loss
from .models import (
    FeatureSynthesisGenerator,
    ImagePairDiscriminator,
    ImageUpscaleGenerator,
    MaskImageDiscriminator,
)

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_ABORTS = 3


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 1e-6) -> float:
    """Half-cosine decay from lr0 at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class ModelBundle:
    g1: FeatureSynthesisGenerator
    d1: MaskImageDiscriminator
    g2: Optional[ImageUpscaleGenerator]
    d2: Optional[ImagePairDiscriminator]

    def named(self) -> dict:
        out = {"g1": self.g1, "d1": self.d1}
        if self.g2 is not None:
            out["g2"] = self.g2
        if self.d2 is not None:
            out["d2"] = self.d2
        return out

    def train(self):
        for m in self.named().values():
            m.train()

    def eval(self):
        for m in self.named().values():
            m.eval()


@dataclass
class TrainState:
    step: int
    models: ModelBundle
    opt_g: torch.optim.Optimizer
    opt_d1: torch.optim.Optimizer
    opt_d2: Optional[torch.optim.Optimizer]
    aborts: int = 0
    best_psnr: float = float("-inf")

    def optimizers(self) -> dict:
        out = {"opt_g": self.opt_g, "opt_d1": self.opt_d1}
        if self.opt_d2 is not None:
            out["opt_d2"] = self.opt_d2
        return out


def build_models(cfg: TrainConfig) -> ModelBundle:
    """Construct all networks with initialization seeded by cfg.seed."""
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.backbone_config())
    g1 = FeatureSynthesisGenerator(
        backbone,
        decoder_dims=cfg.decoder_dims,
        head_width=cfg.head_width,
        se_reduction=cfg.se_reduction,
        with_highpass=not cfg.no_highpass,
        with_seg=not cfg.no_seg,
    )
    d1 = MaskImageDiscriminator(cfg.d1_channels, cfg.patch_layers)
    if cfg.no_part2:
        g2 = d2 = None
    else:
        g2 = ImageUpscaleGenerator(
            width=cfg.g2_width,
            up_width=cfg.g2_up_width,
            post_blocks=cfg.g2_post_blocks,
            se_reduction=math.gcd(cfg.se_reduction, cfg.g2_width),
        )
        d2 = ImagePairDiscriminator(cfg.d2_channels, cfg.patch_layers)
    return ModelBundle(g1, d1, g2, d2)


def build_optimizers(cfg: TrainConfig, models: ModelBundle):
    g_params = list(models.g1.parameters())
    if models.g2 is not None:
        g_params += list(models.g2.parameters())
    opt_g = torch.optim.AdamW(
        g_params,
        lr=cfg.lr0,
        betas=(cfg.adamw_beta1, cfg.adamw_beta2),
        weight_decay=cfg.adamw_weight_decay,
    )
    opt_d1 = torch.optim.RMSprop(models.d1.parameters(), lr=cfg.lr0, alpha=cfg.rmsprop_alpha)
    opt_d2 = None
    if models.d2 is not None:
        opt_d2 = torch.optim.Adam(
            models.d2.parameters(), lr=cfg.lr0, betas=(cfg.adam_beta1, cfg.adam_beta2)
        )
    return opt_g, opt_d1, opt_d2


def init_train_state(cfg: TrainConfig) -> TrainState:
    models = build_models(cfg)
    opt_g, opt_d1, opt_d2 = build_optimizers(cfg, models)
    return TrainState(step=0, models=models, opt_g=opt_g, opt_d1=opt_d1, opt_d2=opt_d2)


class _NonFiniteLoss(Exception):
    pass


def _finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value):
        raise _NonFiniteLoss(name)
    return value


def _snapshot(state: TrainState) -> dict:
    snap = {f"model.{k}": copy.deepcopy(m.state_dict()) for k, m in state.models.named().items()}
    snap.update({k: copy.deepcopy(o.state_dict()) for k, o in state.optimizers().items()})
    return snap


def _restore(state: TrainState, snap: dict) -> None:
    for name, module in state.models.named().items():
        module.load_state_dict(snap[f"model.{name}"])
    for name, opt in state.optimizers().items():
        opt.load_state_dict(snap[name])


def train_step(batch: dict, state: TrainState, cfg: TrainConfig) -> Optional[LossReport]:
    """One optimization step; returns None when the step was aborted
    because a loss went non-finite (state rolled back)."""
    lr = cosine_lr(state.step, cfg.total_steps, cfg.lr0, cfg.lr_min)
    for opt in state.optimizers().values():
        for group in opt.param_groups:
            group["lr"] = lr
    snap = _snapshot(state)
    try:
        return _attempt_step(batch, state, cfg)
    except _NonFiniteLoss as exc:
        _restore(state, snap)
        state.aborts += 1
        log.warning("step %d aborted: non-finite %s (%d consecutive)", state.step, exc, state.aborts)
        if state.aborts >= MAX_CONSECUTIVE_ABORTS:
            raise TrainingError(
                f"{MAX_CONSECUTIVE_ABORTS} consecutive non-finite steps at step {state.step}"
            ) from exc
        return None


def _attempt_step(batch: dict, state: TrainState, cfg: TrainConfig) -> LossReport:
    weights = cfg.loss_weights()
    models = state.models
    models.train()
    g1, d1, g2, d2 = models.g1, models.d1, models.g2, models.d2
    t256, tfg256, tfg512 = batch["t256"], batch["tfg256"], batch["tfg512"]
    sg, hg = batch["sg256"], batch["hg256"]

    out = g1(t256)
    hp, sp, tfp = out.hp256, out.sp256, out.tfp256
    # With the segmentation branch ablated, D1 and G2 keep their arity by
    # conditioning on an all-zero mask.
    zero_mask = torch.zeros_like(sg)
    mask_real = sg if sp is not None else zero_mask
    mask_fake = sp if sp is not None else zero_mask
    if g2 is not None:
        tfp512 = g2(mask_fake, tfp)
        tfp512_o = g2(mask_real, tfg256)

    # D1 on (real mask, real image) vs detached fakes
    d1_loss = (
        F.softplus(-d1(mask_real, tfg256)).mean()
        + F.softplus(d1(mask_fake.detach(), tfp.detach())).mean()
    )
    _finite(d1_loss, "d1_loss")
    state.opt_d1.zero_grad(set_to_none=True)
    d1_loss.backward()
    state.opt_d1.step()

    # D2 on the ground-truth-referenced triple with detached fakes
    d2_loss = None
    if d2 is not None:
        d2_loss = (
            F.softplus(-d2(tfg512, tfg512)).mean()
            + F.softplus(d2(tfp512.detach(), tfg512)).mean()
            + F.softplus(d2(tfp512_o.detach(), tfg512)).mean()
        )
        _finite(d2_loss, "d2_loss")
        state.opt_d2.zero_grad(set_to_none=True)
        d2_loss.backward()
        state.opt_d2.step()

    # Generator losses against the just-updated discriminators
    h_term = _finite(h_loss(hg, hp), "h_loss") if hp is not None else None
    s_term = _finite(s_loss(sg, sp), "s_loss") if sp is not None else None
    tf_term = _finite(tf_loss(tfg256, tfp), "tf_loss")
    gan_g1 = _finite(F.softplus(-d1(mask_fake, tfp)).mean(), "gan_g1")
    g1_tot = g1_total(gan_g1, h_term, s_term, tf_term, weights)
    total = g1_tot
    g2_fields = {}
    if g2 is not None:
        adv = (
            F.softplus(-d2(tfp512, tfg512)).mean()
            + F.softplus(-d2(tfp512_o, tfg512)).mean()
        )
        l1_pred = (tfg512 - tfp512).abs().mean()
        l1_gtcond = (tfg512 - tfp512_o).abs().mean()
        g2_tot = (
            weights.g2_adv * adv
            + weights.g2_l1_pred * l1_pred
            + weights.g2_l1_gtcond * l1_gtcond
        )
        _finite(g2_tot, "g2_total")
        total = total + g2_tot
        g2_fields = {
            "g2_adv": adv.item(),
            "g2_l1_pred": l1_pred.item(),
            "g2_l1_gtcond": l1_gtcond.item(),
            "g2_total": g2_tot.item(),
            "d2_loss": d2_loss.item(),
        }
    _finite(total, "total")
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    state.aborts = 0
    state.step += 1
    return LossReport(
        h_loss=h_term.item() if h_term is not None else None,
        s_loss=s_term.item() if s_term is not None else None,
        tf_loss=tf_term.item(),
        gan_g1=gan_g1.item(),
        gan_d1=d1_loss.item(),
        g1_total=g1_tot.item(),
        **g2_fields,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    """Write the full training state into a tensor archive."""
    tensors = {}
    for name, module in state.models.named().items():
        for key, value in module.state_dict().items():
            tensors[f"model.{name}.{key}"] = value
    scalars = {}
    param_groups = {}
    for name, opt in state.optimizers().items():
        sd = opt.state_dict()
        param_groups[name] = sd["param_groups"]
        for pid, pstate in sd["state"].items():
            for key, value in pstate.items():
                full = f"{name}.state.{pid}.{key}"
                if isinstance(value, torch.Tensor):
                    tensors[full] = value
                else:
                    scalars[full] = value
    tensors["rng.torch"] = torch.get_rng_state()
    extra = {
        "kind": "train-state",
        "step": state.step,
        "aborts": state.aborts,
        "best_psnr": state.best_psnr,
        "cfg": cfg.to_dict(),
        "param_groups": param_groups,
        "opt_scalars": scalars,
    }
    save_archive(path, tensors, extra)


def load_checkpoint(path):
    """Rebuild (cfg, TrainState) from a checkpoint archive."""
    tensors, extra = load_archive(path)
    if extra.get("kind") != "train-state":
        raise ConfigurationError(f"{path} is not a training checkpoint")
    cfg = TrainConfig.from_dict(extra["cfg"])
    state = init_train_state(cfg)
    for name, module in state.models.named().items():
        prefix = f"model.{name}."
        module_state = {
            key[len(prefix):]: torch.from_numpy(arr)
            for key, arr in tensors.items()
            if key.startswith(prefix)
        }
        target = module.state_dict()
        for key, value in module_state.items():
            module_state[key] = value.to(target[key].dtype)
        module.load_state_dict(module_state)
    for name, opt in state.optimizers().items():
        prefix = f"{name}.state."
        opt_state = {}
        for key, arr in tensors.items():
            if key.startswith(prefix):
                pid, field_name = key[len(prefix):].split(".", 1)
                opt_state.setdefault(int(pid), {})[field_name] = torch.from_numpy(arr)
        for key, value in extra.get("opt_scalars", {}).items():
            if key.startswith(prefix):
                pid, field_name = key[len(prefix):].split(".", 1)
                opt_state.setdefault(int(pid), {})[field_name] = value
        opt.load_state_dict(
            {"state": opt_state, "param_groups": extra["param_groups"][name]}
        )
    torch.set_rng_state(torch.from_numpy(tensors["rng.torch"]).to(torch.uint8))
    state.step = int(extra["step"])
    state.aborts = int(extra["aborts"])
    state.best_psnr = float(extra["best_psnr"])
    return cfg, state


# ---------------------------------------------------------------------------
# Fit / evaluate
# ---------------------------------------------------------------------------


def _append_log(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def fit(cfg: TrainConfig, manifest: DatasetManifest | str | None = None, resume=None) -> TrainState:
    """Run the training loop, writing checkpoints and a JSONL log.

    Resuming from a checkpoint continues the loss trajectory exactly
    under fixed seeds: batch composition is a pure function of
    (manifest, seed, step) and the checkpoint restores every parameter
    and optimizer tensor bit-for-bit.
    """
    from .config import write_config

    if manifest is None or isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest or cfg.manifest)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        _, state = load_checkpoint(resume)
    else:
        state = init_train_state(cfg)
    loader = DatasetLoader(manifest, cfg.batch_size, cfg.seed)
    val_manifest = None
    if cfg.val_manifest:
        val_manifest = read_manifest(cfg.val_manifest)
    write_config(out_dir / "config.cfg", cfg)
    log_path = out_dir / "log.jsonl"
    while state.step < cfg.total_steps:
        step_index = state.step
        batch = loader.load_batch(step_index)
        lr = cosine_lr(step_index, cfg.total_steps, cfg.lr0, cfg.lr_min)
        report = train_step(batch, state, cfg)
        if report is None:
            continue
        _append_log(log_path, {"type": "step", "step": step_index, "lr": lr, **report.to_dict()})
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{state.step:06d}.tpz", state, cfg)
        if val_manifest is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            report_val = evaluate((cfg, state), val_manifest)
            if report_val.psnr > state.best_psnr:
                state.best_psnr = report_val.psnr
            _append_log(
                log_path,
                {"type": "val", "step": state.step, **report_val.to_dict()},
            )
    save_checkpoint(out_dir / "ckpt_final.tpz", state, cfg)
    return state


def infer_batch(models: ModelBundle, t256: torch.Tensor, no_part2: bool = False):
    """Eval-mode forward through both parts; returns (part1, tfp512)."""
    out = models.g1(t256)
    sp = out.sp256 if out.sp256 is not None else torch.zeros_like(t256[:, :1])
    if no_part2 or models.g2 is None:
        tfp512 = F.interpolate(out.tfp256, scale_factor=2, mode="bilinear", align_corners=False)
    else:
        tfp512 = models.g2(sp, out.tfp256)
    return out, tfp512


def evaluate(source, manifest, detector=None, identity=False, batch_size: int = 2) -> M.MetricsReport:
    """Metrics over a split using predicted conditioning only.

    ``source`` is a checkpoint path or a (cfg, TrainState) pair.
    ``identity`` scores the ground truth against itself (pipeline
    sanity harness).  Without a detector the detector fields are 0.
    """
    if isinstance(source, (str, Path)):
        cfg, state = load_checkpoint(source)
    else:
        cfg, state = source
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    models = state.models
    models.eval()
    loader = DatasetLoader(manifest, batch_size, shuffle_seed=cfg.seed)
    psnrs, ssims, mses = [], [], []
    images, gt_boxes = [], []
    with torch.no_grad():
        for batch in loader.iter_epoch(0):
            if identity:
                outputs = batch["tfg512"]
            else:
                _, outputs = infer_batch(models, batch["t256"], cfg.no_part2)
            for i in range(outputs.shape[0]):
                a = outputs[i : i + 1].double()
                b = batch["tfg512"][i : i + 1].double()
                psnrs.append(M.psnr(a, b))
                ssims.append(float(M.ssim(a, b)))
                mses.append(M.mse(a, b))
            if detector is not None:
                for i in range(outputs.shape[0]):
                    images.append(outputs[i])
                    gt_boxes.append(batch["boxes"][i])
    if detector is not None:
        precision, recall, f1 = M.detector_eval(images, gt_boxes, detector)
    else:
        precision = recall = f1 = 0.0
    return M.MetricsReport(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mse=float(np.mean(mses)),
        precision=precision,
        recall=recall,
        f1=f1,
    )
