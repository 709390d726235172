"""Command-line entry points: datagen, train, eval, infer.

Exit codes: 0 success, 1 usage/configuration, 2 data error,
3 training failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import load_config
from .data import (
    DatasetManifest,
    ManifestRecord,
    TextSpec,
    downsample_avg,
    synth_render,
    write_manifest,
)
from .errors import ArchiveError, ConfigurationError, DataError, TrainingError
from .metrics import builtin_text_detector
from .train import evaluate, fit, infer_batch, load_checkpoint

log = logging.getLogger("texterase")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def _parse_overrides(pairs):
    settings = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        settings.append((key.strip(), value.strip()))
    return settings


def _check_outputs(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigurationError(
            f"refusing to overwrite existing outputs (use --force): {existing[:5]}"
        )


def _save_png(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def cmd_datagen(args) -> int:
    bg_dir = Path(args.backgrounds)
    if not bg_dir.is_dir():
        raise DataError(f"backgrounds directory not found: {bg_dir}")
    backgrounds = sorted(p for p in bg_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    if not backgrounds:
        raise DataError(f"no background images in {bg_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = TextSpec(
        min_strings=args.min_strings,
        max_strings=args.max_strings,
        min_size=args.min_size,
        max_size=args.max_size,
        max_rotation=args.max_rotation,
    )
    names = []
    for i in range(args.count):
        stem = f"{i:04d}"
        names += [f"{stem}_input.png", f"{stem}_textfree.png", f"{stem}_mask.png"]
    _check_outputs([out_dir / n for n in names] + [out_dir / "manifest.tsv"], args.force)
    records = []
    for i in range(args.count):
        rng = np.random.default_rng([args.seed, i])
        bg_path = backgrounds[int(rng.integers(0, len(backgrounds)))]
        background = np.asarray(Image.open(bg_path).convert("RGB"))
        composited, clean, mask, boxes = synth_render(background, spec, rng)
        stem = f"{i:04d}"
        _save_png(out_dir / f"{stem}_input.png", composited)
        _save_png(out_dir / f"{stem}_textfree.png", clean)
        _save_png(out_dir / f"{stem}_mask.png", mask * 255)
        records.append(
            ManifestRecord(
                input_path=f"{stem}_input.png",
                textfree_path=f"{stem}_textfree.png",
                mask_path=f"{stem}_mask.png",
                boxes=boxes,
            )
        )
    manifest = DatasetManifest(records, split="train", seed=args.seed)
    write_manifest(out_dir / "manifest.tsv", manifest)
    print(f"wrote {args.count} records to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _parse_overrides(args.set))
    if args.seed is not None:
        cfg = load_config(args.config, _parse_overrides(args.set) + [("seed", str(args.seed))])
    log_file = Path(cfg.out_dir) / "log.jsonl"
    if log_file.exists() and not args.force and not args.resume:
        raise ConfigurationError(
            f"{log_file} already exists; pass --force to append or --resume to continue"
        )
    state = fit(cfg, resume=args.resume)
    print(f"training finished at step {state.step}; outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_txt = out_dir / "report.txt"
    report_json = out_dir / "report.json"
    _check_outputs([report_txt, report_json], args.force)
    detector = builtin_text_detector if args.detector == "builtin" else None
    report = evaluate(args.checkpoint, args.manifest, detector=detector, identity=args.identity)
    report.write_text(report_txt)
    report.write_json(report_json)
    for key, value in report.to_dict().items():
        print(f"{key} = {value:.6f}")
    return EXIT_OK


def _iter_input_images(path: Path):
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    return [path]


def cmd_infer(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    state.models.eval()
    inputs = _iter_input_images(Path(args.input))
    if not inputs:
        raise DataError(f"no input images under {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    planned = [out_dir / f"{p.stem}_erased.png" for p in inputs]
    _check_outputs(planned, args.force)
    failures = 0
    for src, dst in zip(inputs, planned):
        try:
            image = Image.open(src).convert("RGB")
        except OSError as exc:
            log.error("cannot read %s: %s", src, exc)
            failures += 1
            continue
        orig_size = image.size
        arr = torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0).permute(2, 0, 1)
        t512 = arr.unsqueeze(0)
        if orig_size != (512, 512):
            log.info("resizing %s from %s to 512x512 and back (bilinear)", src, orig_size)
            t512 = torch.nn.functional.interpolate(
                t512, size=(512, 512), mode="bilinear", align_corners=False
            )
        with torch.no_grad():
            part1, tfp512 = infer_batch(state.models, downsample_avg(t512), cfg.no_part2)
        result = tfp512
        if orig_size != (512, 512):
            result = torch.nn.functional.interpolate(
                result, size=(orig_size[1], orig_size[0]), mode="bilinear", align_corners=False
            )
        _save_png(dst, result[0].permute(1, 2, 0).numpy())
        if args.dump_intermediates:
            stem = dst.with_suffix("")
            if part1.sp256 is not None:
                sp = part1.sp256[0, 0].numpy()
                _save_png(f"{stem}_sp_soft.png", sp)
                _save_png(f"{stem}_sp_mask.png", (sp > 0.5).astype(np.float32))
            if part1.hp256 is not None:
                _save_png(f"{stem}_hp.png", part1.hp256[0, 0].numpy())
            _save_png(f"{stem}_tf256.png", part1.tfp256[0].permute(1, 2, 0).numpy())
    if failures:
        log.error("%d input(s) failed", failures)
        return EXIT_DATA
    print(f"wrote {len(inputs)} erased image(s) to {out_dir}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="texterase", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render a synthetic supervised dataset")
    p.add_argument("--backgrounds", required=True, help="directory of background images")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-strings", type=int, default=1)
    p.add_argument("--max-strings", type=int, default=8)
    p.add_argument("--min-size", type=int, default=12)
    p.add_argument("--max-size", type=int, default=72)
    p.add_argument("--max-rotation", type=float, default=45.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detector", choices=["none", "builtin"], default="none")
    p.add_argument("--identity", action="store_true", help="score ground truth against itself")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="erase text from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-intermediates", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchiveError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
