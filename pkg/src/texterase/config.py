"""Run configuration.

Configs are plain-text ``key = value`` files ('#' starts a comment).
Values are coerced by the declared field type; comma lists map to
tuples.  Unknown keys are rejected by exact name so typos fail loudly.
"""

from dataclasses import dataclass, fields, asdict
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigurationError
from .losses import LossWeights

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    """Everything a training run needs, flat for easy overriding."""

    # data
    manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "runs/default"
    # backbone
    backbone: str = "pvt"
    embed_dims: tuple = (32, 64, 128, 256)
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    mlp_ratio: int = 4
    # decoder / heads
    decoder_dims: tuple = (128, 64, 32, 16)
    head_width: int = 16
    se_reduction: int = 16
    # discriminators
    d1_channels: int = 64
    d2_channels: int = 64
    patch_layers: int = 4
    # part-2 generator
    g2_width: int = 32
    g2_up_width: int = 16
    g2_post_blocks: int = 2
    # optimization
    lr0: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 4
    total_steps: int = 1000
    seed: int = 0
    adamw_beta1: float = 0.9
    adamw_beta2: float = 0.999
    adamw_weight_decay: float = 0.01
    rmsprop_alpha: float = 0.99
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    # loss weights
    w_gan_g1: float = 1.0
    w_h: float = 1.0
    w_s: float = 1.0
    w_tf: float = 1.0
    w_g2_adv: float = 1.0
    w_g2_l1_pred: float = 1.0
    w_g2_l1_gtcond: float = 1.0
    # ablation switches
    no_highpass: bool = False
    no_seg: bool = False
    no_part2: bool = False
    # cadence
    checkpoint_every: int = 500
    eval_every: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be > 0")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            embed_dims=self.embed_dims,
            depths=self.depths,
            heads=self.heads,
            sr_ratios=self.sr_ratios,
            mlp_ratio=self.mlp_ratio,
            variant=self.backbone,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            gan_g1=self.w_gan_g1,
            h=self.w_h,
            s=self.w_s,
            tf=self.w_tf,
            g2_adv=self.w_g2_adv,
            g2_l1_pred=self.w_g2_l1_pred,
            g2_l1_gtcond=self.w_g2_l1_gtcond,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return apply_settings(cls(), {k: v for k, v in data.items()})


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(name: str, value):
    """Coerce a raw (string or JSON) value to the field's declared type."""
    kind = _FIELDS[name].type
    default = getattr(TrainConfig(), name)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigurationError(f"config key {name}: expected a boolean, got {value!r}")
    if isinstance(default, tuple) or kind == "tuple":
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        parts = [p for p in str(value).replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def apply_settings(cfg: TrainConfig, settings: dict) -> TrainConfig:
    """Return a copy of cfg with settings applied; unknown keys raise."""
    values = asdict(cfg)
    for key, raw in settings.items():
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key: {key}")
        try:
            values[key] = _coerce(key, raw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"config key {key}: bad value {raw!r} ({exc})") from exc
    values = {k: tuple(v) if isinstance(getattr(TrainConfig(), k), tuple) else v for k, v in values.items()}
    return TrainConfig(**values)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a raw string mapping."""
    settings = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def load_config(path=None, overrides=None) -> TrainConfig:
    """Build a TrainConfig from an optional file plus key=value overrides."""
    cfg = TrainConfig()
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigurationError(f"config file not found: {file_path}")
        cfg = apply_settings(cfg, parse_config_text(file_path.read_text()))
    if overrides:
        cfg = apply_settings(cfg, dict(overrides))
    return cfg


def write_config(path, cfg: TrainConfig) -> None:
    """Write the resolved configuration as key = value lines."""
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
