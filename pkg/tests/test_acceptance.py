"""Acceptance criteria, one test per criterion.

Each test prints a one-line PASS/FAIL verdict (visible with -s or in
captured output); the asserts enforce the same conditions.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from texterase.backbone import BackboneConfig, PyramidTransformer
from texterase.blocks import AttentionFuse, BlockConfig, PatchDiscriminator, QBlock, SEBlock
from texterase.cli import main as cli_main
from texterase.config import load_config
from texterase.data import DatasetLoader, laplacian_highpass, read_manifest, render_background
from texterase.losses import (
    g2_loss_parts,
    g2_total,
    gan_loss_part1,
    h_loss,
    s_loss,
    tf_loss,
)
from texterase.metrics import builtin_text_detector, detector_eval, mse, psnr, ssim
from texterase.models import (
    FeatureSynthesisGenerator,
    ImagePairDiscriminator,
    ImageUpscaleGenerator,
    MaskImageDiscriminator,
)
from texterase.train import cosine_lr, fit, infer_batch

from conftest import fd_gradient, micro_train_config, rel_grad_error
from oracles import (
    np_batchnorm_eval,
    np_conv2d,
    np_laplacian_highpass,
    np_se,
    np_sigmoid,
    np_ssim,
    patch_extent_chain,
)


def _verdict(number, name, ok, detail=""):
    print(f"ACCEPTANCE {number} ({name}): {'PASS' if ok else 'FAIL'} {detail}")


# -----------------------------------------------------------------------
# Criterion 1: loss identities
# -----------------------------------------------------------------------


def test_criterion_1_loss_identities():
    start = time.time()
    torch.manual_seed(0)
    x = torch.rand(2, 1, 32, 32)
    img = torch.rand(2, 3, 32, 32)
    mask = (torch.rand(2, 1, 32, 32) > 0.5).float()

    h_zero = float(h_loss(x, x))
    tf_zero = float(tf_loss(img, img))
    s_zero = float(s_loss(mask, mask))
    _, l1p, l1g, _ = g2_loss_parts(lambda c, r: torch.zeros(2, 1, 3, 3), img, img, img)
    elapsed = time.time() - start

    ok = (
        h_zero == 0.0
        and tf_zero <= 1e-6
        and s_zero <= 1e-5
        and float(l1p) == 0.0
        and float(l1g) == 0.0
        and elapsed < 10.0
    )
    _verdict(1, "loss identities", ok,
             f"h={h_zero} tf={tf_zero:.2e} s={s_zero:.2e} l1=({float(l1p)},{float(l1g)}) in {elapsed:.2f}s")
    assert h_zero == 0.0
    assert tf_zero <= 1e-6
    assert s_zero <= 1e-5
    assert float(l1p) == 0.0 and float(l1g) == 0.0
    assert elapsed < 10.0


# -----------------------------------------------------------------------
# Criterion 2: analytic gradients vs central finite differences
# -----------------------------------------------------------------------


def _fd_check(name, loss_fn, *tensors):
    """loss_fn consumes float64 leaf tensors; returns worst relative error."""
    worst = 0.0
    for i, t in enumerate(tensors):
        leafs = [u.detach().clone().requires_grad_(j == i) for j, u in enumerate(tensors)]
        value = loss_fn(*leafs)
        (analytic,) = torch.autograd.grad(value, leafs[i])
        probe = tensors[i].detach().clone()

        def f(p, idx=i):
            args = [p if j == idx else tensors[j].detach() for j in range(len(tensors))]
            return loss_fn(*args)

        with torch.no_grad():
            numeric = fd_gradient(f, probe, eps=1e-6)
        worst = max(worst, rel_grad_error(analytic, numeric))
    return worst


def test_criterion_2_gradient_suite():
    start = time.time()
    torch.manual_seed(1)
    results = {}

    hg = torch.rand(1, 1, 5, 5, dtype=torch.float64)
    hp = torch.rand(1, 1, 5, 5, dtype=torch.float64)
    results["h_loss"] = _fd_check("h", lambda a, b: h_loss(a, b), hg, hp)

    sg = (torch.rand(1, 1, 5, 5) > 0.5).double()
    sp = (torch.rand(1, 1, 5, 5, dtype=torch.float64) * 0.8 + 0.1)
    results["s_loss"] = _fd_check("s", lambda a, b: s_loss(a, b), sg, sp)

    tfg = torch.rand(1, 3, 5, 5, dtype=torch.float64)
    tfp = torch.rand(1, 3, 5, 5, dtype=torch.float64)
    results["tf_loss"] = _fd_check("tf", lambda a, b: tf_loss(a, b), tfg, tfp)

    d1 = MaskImageDiscriminator(4, patch_layers=2).double()
    sg16 = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    tfg16 = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    sp16 = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    tfp16 = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    results["gan_g1"] = _fd_check(
        "gan_g", lambda s, t: gan_loss_part1(d1, sg16, tfg16, s, t)[0], sp16, tfp16
    )
    results["gan_d1"] = _fd_check(
        "gan_d", lambda s, t: gan_loss_part1(d1, s, t, sp16, tfp16)[1], sg16, tfg16
    )

    d2 = ImagePairDiscriminator(4, patch_layers=2).double()
    a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    b = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    c = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    results["g2_total"] = _fd_check(
        "g2", lambda p, q: g2_total(d2, p, q, c)[0], a, b
    )

    elapsed = time.time() - start
    worst = max(results.values())
    ok = worst < 1e-3 and elapsed < 60.0
    _verdict(2, "gradient suite", ok,
             f"worst rel err {worst:.2e} in {elapsed:.1f}s ({ {k: f'{v:.1e}' for k, v in results.items()} })")
    for name, err in results.items():
        assert err < 1e-3, f"{name}: {err}"
    assert elapsed < 60.0


# -----------------------------------------------------------------------
# Criterion 3: oracle suite
# -----------------------------------------------------------------------


def test_criterion_3_oracle_suite():
    torch.manual_seed(2)
    rng = np.random.default_rng(2)

    # Laplacian vs direct convolution on 20 random 16x16 images
    lap_worst = 0.0
    for _ in range(20):
        arr = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
        ours = laplacian_highpass(torch.from_numpy(arr))[0].numpy()
        lap_worst = max(lap_worst, float(np.abs(ours - np_laplacian_highpass(arr)).max()))

    # SSIM / PSNR / MSE vs sliding-window and formula oracles
    a = torch.from_numpy(rng.uniform(0, 1, (1, 3, 24, 24)))
    b = torch.from_numpy(np.clip(a.numpy() + rng.normal(0, 0.08, a.shape), 0, 1))
    ssim_err = abs(float(ssim(a, b)) - np_ssim(a, b))
    mse_err = abs(mse(a, b) - float(((a.numpy() - b.numpy()) ** 2).mean()))
    psnr_err = abs(psnr(a, b) - 10 * math.log10(1.0 / mse(a, b)))

    # SE / Q-block / attention-fuse step-by-step recomputation
    se = SEBlock(8, reduction=2).eval()
    x = torch.randn(1, 8, 5, 5)
    se_oracle, _ = np_se(
        x[0].numpy(),
        se.fc1.weight.detach().numpy(), se.fc1.bias.detach().numpy(),
        se.fc2.weight.detach().numpy(), se.fc2.bias.detach().numpy(),
    )
    se_err = float(np.abs(se(x)[0].detach().numpy() - se_oracle).max())

    q = QBlock(3, 4, se_reduction=2).eval()
    xq = torch.randn(1, 3, 5, 5)
    with torch.no_grad():
        out_q = q(xq)
        route1 = q.se(q.shortcut_bn(q.shortcut_conv(xq)))
        route2 = q.body(xq)
    q_err = float((out_q - (route1 + route2)).abs().max())
    # route 1 itself against the numpy chain
    r1_np = np_batchnorm_eval(
        np_conv2d(xq[0].numpy(), q.shortcut_conv.weight.detach().numpy()),
        q.shortcut_bn.running_mean.numpy(), q.shortcut_bn.running_var.numpy(),
        q.shortcut_bn.weight.detach().numpy(), q.shortcut_bn.bias.detach().numpy(),
    )
    r1_np, _ = np_se(
        r1_np,
        q.se.fc1.weight.detach().numpy(), q.se.fc1.bias.detach().numpy(),
        q.se.fc2.weight.detach().numpy(), q.se.fc2.bias.detach().numpy(),
    )
    q_err = max(q_err, float(np.abs(route1[0].detach().numpy() - r1_np).max()))

    att = AttentionFuse(3, 2)
    f1, f2, f3 = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4), torch.randn(1, 2, 4, 4)
    amap = np_sigmoid(np_conv2d(
        np.concatenate([f1[0].numpy(), f2[0].numpy()]),
        att.conv.weight.detach().numpy(), att.conv.bias.detach().numpy(),
    ))
    att_err = float(np.abs(att(f1, f2, f3)[0].detach().numpy() - amap * f3[0].numpy()).max())

    # PatchGAN extents exact
    extents_ok = True
    for channels, size, expected in ((4, 256, 30), (6, 512, 62)):
        disc = PatchDiscriminator(BlockConfig(channels, 8, se_reduction=1))
        out = disc(torch.rand(1, channels, size, size))
        extents_ok &= out.shape[-2:] == (expected, expected)
        extents_ok &= patch_extent_chain(size, 4) == expected

    ok = (
        lap_worst <= 1e-6
        and ssim_err <= 1e-6 and mse_err <= 1e-6 and psnr_err <= 1e-6
        and se_err <= 1e-5 and q_err <= 1e-5 and att_err <= 1e-5
        and extents_ok
    )
    _verdict(3, "oracle suite", ok,
             f"lap={lap_worst:.1e} ssim={ssim_err:.1e} se={se_err:.1e} q={q_err:.1e} att={att_err:.1e}")
    assert lap_worst <= 1e-6
    assert ssim_err <= 1e-6 and mse_err <= 1e-6 and psnr_err <= 1e-6
    assert se_err <= 1e-5 and q_err <= 1e-5 and att_err <= 1e-5
    assert extents_ok


# -----------------------------------------------------------------------
# Criterion 4: shape/range pipeline
# -----------------------------------------------------------------------


def test_criterion_4_shapes_and_ranges():
    torch.manual_seed(3)
    cfg = BackboneConfig(embed_dims=(16, 32, 64, 128), depths=(1, 1, 1, 1))
    backbone = PyramidTransformer(cfg)
    pyr = backbone(torch.rand(1, 3, 256, 256))
    strides_ok = [s.shape[-1] for s in pyr.stages] == [64, 32, 16, 8]

    g1 = FeatureSynthesisGenerator(
        backbone, decoder_dims=(32, 24, 16, 8), head_width=8, se_reduction=8
    ).eval()
    g2 = ImageUpscaleGenerator(width=12, up_width=6, post_blocks=1, se_reduction=4).eval()
    shapes_ok = ranges_ok = True
    for batch in (1, 2, 4):
        with torch.no_grad():
            out = g1(torch.rand(batch, 3, 256, 256))
            up = g2(out.sp256, out.tfp256)
        shapes_ok &= out.hp256.shape == (batch, 1, 256, 256)
        shapes_ok &= out.sp256.shape == (batch, 1, 256, 256)
        shapes_ok &= out.tfp256.shape == (batch, 3, 256, 256)
        shapes_ok &= up.shape == (batch, 3, 512, 512)
        for t in (out.hp256, out.tfp256, up):
            ranges_ok &= 0.0 <= float(t.min()) and float(t.max()) <= 1.0
        ranges_ok &= 0.0 < float(out.sp256.min()) and float(out.sp256.max()) < 1.0

    ok = strides_ok and shapes_ok and ranges_ok
    _verdict(4, "shape/range pipeline", ok,
             f"strides={strides_ok} shapes={shapes_ok} ranges={ranges_ok}")
    assert strides_ok and shapes_ok and ranges_ok


# -----------------------------------------------------------------------
# Criterion 5: end-to-end gradient flow
# -----------------------------------------------------------------------


def test_criterion_5_end_to_end_gradient_flow():
    torch.manual_seed(4)
    cfg = BackboneConfig(embed_dims=(16, 32, 64, 128), depths=(1, 1, 1, 1))
    g1 = FeatureSynthesisGenerator(
        PyramidTransformer(cfg), decoder_dims=(32, 24, 16, 8), head_width=8, se_reduction=8
    )
    g2 = ImageUpscaleGenerator(width=12, up_width=6, post_blocks=1, se_reduction=4)
    d2 = ImagePairDiscriminator(8, patch_layers=4)

    out = g1(torch.rand(1, 3, 256, 256))
    tfp512 = g2(out.sp256, out.tfp256)
    tfp512_o = g2(torch.rand(1, 1, 256, 256), torch.rand(1, 3, 256, 256))
    tfg512 = torch.rand(1, 3, 512, 512)
    g_term, _ = g2_total(d2, tfp512, tfp512_o, tfg512)
    g_term.backward()

    norms = {}
    for i, stage in enumerate(g1.backbone.stages):
        norms[f"stage{i+1}"] = sum(
            p.grad.norm().item() for p in stage.parameters() if p.grad is not None
        )
    ok = all(v > 0 for v in norms.values())
    _verdict(5, "end-to-end gradient flow", ok, f"encoder grad norms {norms}")
    assert ok


# -----------------------------------------------------------------------
# Criterion 6: toy overfit
# -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    bg = root / "bg"
    bg.mkdir()
    from PIL import Image

    for i in range(3):
        rng = np.random.default_rng([99, i])
        arr = render_background(rng)
        Image.fromarray((arr * 255).round().astype(np.uint8)).save(bg / f"bg{i}.png")
    rc = cli_main(
        ["datagen", "--backgrounds", str(bg), "--out", str(root / "data8"),
         "--count", "8", "--seed", "7"]
    )
    assert rc == 0
    cfg = load_config(
        Path(__file__).parent.parent / "configs" / "overfit8.cfg",
        [("manifest", str(root / "data8" / "manifest.tsv")), ("out_dir", str(root / "run"))],
    )
    state = fit(cfg)
    return cfg, state


def test_criterion_6_toy_overfit(overfit_run):
    cfg, state = overfit_run
    manifest = read_manifest(cfg.manifest)
    loader = DatasetLoader(manifest, 2, shuffle_seed=cfg.seed)
    state.models.eval()
    psnrs, psnrs_o, ious, l1_256 = [], [], [], []
    in_images, out_images, gt_boxes = [], [], []
    with torch.no_grad():
        for batch in loader.iter_epoch(0):
            out1, tfp512 = infer_batch(state.models, batch["t256"])
            tfp512_o = state.models.g2(batch["sg256"], batch["tfg256"])
            for i in range(tfp512.shape[0]):
                psnrs.append(psnr(tfp512[i : i + 1].double(), batch["tfg512"][i : i + 1].double()))
                psnrs_o.append(psnr(tfp512_o[i : i + 1].double(), batch["tfg512"][i : i + 1].double()))
                pred = (out1.sp256[i, 0] > 0.5).float()
                gt = batch["sg256"][i, 0]
                inter = float((pred * gt).sum())
                union = float(((pred + gt) > 0).float().sum())
                ious.append(inter / union if union > 0 else 1.0)
                l1_256.append(float((out1.tfp256[i] - batch["tfg256"][i]).abs().mean()))
                in_images.append(batch["t512"][i])
                out_images.append(tfp512[i])
                gt_boxes.append(batch["boxes"][i])

    mean_psnr = float(np.mean(psnrs))
    mean_psnr_o = float(np.mean(psnrs_o))
    mean_iou = float(np.mean(ious))
    mean_l1 = float(np.mean(l1_256))
    _, _, f1_in = detector_eval(in_images, gt_boxes, builtin_text_detector)
    _, _, f1_out = detector_eval(out_images, gt_boxes, builtin_text_detector)

    ok = (
        mean_psnr >= 25.0
        and mean_iou >= 0.8
        and f1_out < f1_in
        and mean_l1 < 0.05
        and mean_psnr_o >= mean_psnr - 3.0
    )
    _verdict(6, "toy overfit", ok,
             f"PSNR={mean_psnr:.2f}dB IoU={mean_iou:.3f} F1 in/out={f1_in:.1f}/{f1_out:.1f} "
             f"L1@256={mean_l1:.4f} PSNR_o={mean_psnr_o:.2f}dB")
    assert mean_psnr >= 25.0
    assert mean_iou >= 0.8
    assert f1_out < f1_in
    assert mean_l1 < 0.05
    assert mean_psnr_o >= mean_psnr - 3.0


# -----------------------------------------------------------------------
# Criterion 7: ablation switches
# -----------------------------------------------------------------------


def test_criterion_7_ablation_switches(tiny_dataset, tmp_path):
    cases = {
        "no_highpass": ({"no_highpass": True}, {"h_loss"}),
        "no_seg": ({"no_seg": True}, {"s_loss"}),
        "no_part2": (
            {"no_part2": True},
            {"g2_adv", "g2_l1_pred", "g2_l1_gtcond", "g2_total", "d2_loss"},
        ),
        "backbone_cnn": ({"backbone": "cnn"}, set()),
    }
    all_fields = {
        "h_loss", "s_loss", "tf_loss", "gan_g1", "gan_d1", "g1_total",
        "g2_adv", "g2_l1_pred", "g2_l1_gtcond", "g2_total", "d2_loss",
    }
    outcomes = {}
    for name, (flags, removed) in cases.items():
        cfg = micro_train_config(
            manifest=str(tiny_dataset),
            out_dir=str(tmp_path / name),
            total_steps=100,
            **flags,
        )
        fit(cfg)
        records = [
            json.loads(line)
            for line in (tmp_path / name / "log.jsonl").read_text().splitlines()
        ]
        steps = [r for r in records if r["type"] == "step"]
        logged = set().union(*(set(r) for r in steps)) - {"type", "step", "lr"}
        outcomes[name] = (len(steps), logged == all_fields - removed)

    ok = all(n == 100 and fields_ok for n, fields_ok in outcomes.values())
    _verdict(7, "ablation switches", ok, f"{outcomes}")
    for name, (n, fields_ok) in outcomes.items():
        assert n == 100, f"{name} trained {n} steps"
        assert fields_ok, f"{name} logged wrong loss fields"


# -----------------------------------------------------------------------
# Criterion 8: scheduler exactness and bit-identical resume
# -----------------------------------------------------------------------


def test_criterion_8_scheduler_and_resume(tiny_dataset, tmp_path):
    cfg = micro_train_config(
        manifest=str(tiny_dataset), out_dir=str(tmp_path / "base"),
        total_steps=15, checkpoint_every=5,
    )
    fit(cfg)
    base_log = [
        json.loads(line)
        for line in (tmp_path / "base" / "log.jsonl").read_text().splitlines()
    ]
    steps = [r for r in base_log if r["type"] == "step"]
    lr_exact = all(
        r["lr"] == cosine_lr(r["step"], cfg.total_steps, cfg.lr0, cfg.lr_min) for r in steps
    )

    resumed_cfg = micro_train_config(
        manifest=str(tiny_dataset), out_dir=str(tmp_path / "resumed"),
        total_steps=15, checkpoint_every=5,
    )
    fit(resumed_cfg, resume=tmp_path / "base" / "ckpt_000005.tpz")
    resumed_log = [
        json.loads(line)
        for line in (tmp_path / "resumed" / "log.jsonl").read_text().splitlines()
    ]
    tail_base = [r for r in steps if r["step"] >= 5][:10]
    tail_resumed = [r for r in resumed_log if r["type"] == "step"][:10]
    resume_identical = tail_base == tail_resumed

    ok = lr_exact and resume_identical
    _verdict(8, "scheduler/resume", ok,
             f"lr exact={lr_exact}, next-10 losses bit-identical={resume_identical}")
    assert lr_exact
    assert resume_identical
