import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from texterase.cli import main as cli_main
from texterase.config import TrainConfig


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function, coordinate by
    coordinate.  ``x`` should be float64."""
    grad = torch.zeros_like(x)
    flat, grad_flat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        grad_flat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).norm().item()
    scale = max(numeric.norm().item(), 1e-12)
    return diff / scale


def micro_train_config(**overrides) -> TrainConfig:
    """Smallest full-pipeline configuration used across train/CLI tests."""
    base = dict(
        embed_dims=(16, 32, 64, 128),
        depths=(1, 1, 1, 1),
        decoder_dims=(32, 24, 16, 8),
        head_width=8,
        se_reduction=8,
        d1_channels=16,
        d2_channels=8,
        g2_width=12,
        g2_up_width=6,
        g2_post_blocks=1,
        batch_size=2,
        total_steps=4,
        checkpoint_every=0,
        seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def backgrounds_dir(tmp_path_factory) -> Path:
    """Three smooth seeded background images."""
    from texterase.data import render_background

    out = tmp_path_factory.mktemp("backgrounds")
    for i in range(3):
        rng = np.random.default_rng([99, i])
        arr = render_background(rng)
        Image.fromarray((arr * 255).round().astype(np.uint8)).save(out / f"bg{i}.png")
    return out


@pytest.fixture(scope="session")
def tiny_dataset(backgrounds_dir, tmp_path_factory) -> Path:
    """Four generated records; returns the manifest path."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    rc = cli_main(
        [
            "datagen",
            "--backgrounds",
            str(backgrounds_dir),
            "--out",
            str(out),
            "--count",
            "4",
            "--seed",
            "11",
        ]
    )
    assert rc == 0
    return out / "manifest.tsv"


@pytest.fixture(scope="session")
def mini_checkpoint(tiny_dataset, tmp_path_factory):
    """A 2-step trained checkpoint for eval/infer tests."""
    from texterase.train import fit

    out_dir = tmp_path_factory.mktemp("mini_run")
    cfg = micro_train_config(
        manifest=str(tiny_dataset), out_dir=str(out_dir), total_steps=2
    )
    fit(cfg)
    return out_dir / "ckpt_final.tpz"
