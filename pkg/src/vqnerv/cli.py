"""Command-line surface: train, encode, decode, eval, inpaint, interp, rd-curve.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import compression, pipeline
from .errors import ConfigError, DataError, NumericError, ParameterError, VQNervError
from .model import load_checkpoint


def _load_config(args) -> pipeline.RunConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = pipeline.RunConfig.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    else:
        cfg = pipeline.RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set_option(key.strip(), value.strip())
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = pipeline.train(cfg)
    print(f"trained {cfg.epochs} epochs -> {result.checkpoint_path}")
    print(f"psnr {result.final_psnr:.2f} dB  ssim {result.final_ssim:.4f}")
    return 0


def _cmd_encode(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    path, report = pipeline.encode_run(cfg, model)
    print(report.to_text())
    print(f"bitstream -> {path}")
    return 0


def _cmd_decode(args) -> int:
    try:
        with open(args.bitstream, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read bitstream: {exc}") from exc
    reference = None
    if args.reference:
        reference = pipeline.load_frames(args.reference).frames
    frames, report = compression.decode_video(blob, reference)
    os.makedirs(args.output, exist_ok=True)
    with open(os.path.join(args.output, "report.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    with open(os.path.join(args.output, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    if args.dump_frames:
        from PIL import Image
        for t, frame in enumerate(frames):
            img = (np.clip(frame, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(img).save(os.path.join(args.output, f"frame_{t:04d}.png"))
    print(report.to_text())
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = pipeline._load_dataset(cfg).subset(cfg.split)
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = pipeline.eval_regression(model, dataset.frames,
                                    os.path.join(cfg.output_dir, "metrics.csv"))
    mean_p = float(np.mean([r[0] for r in rows]))
    print(f"regression psnr {mean_p:.2f} dB over {len(rows)} frames")
    return 0


def _cmd_inpaint(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = pipeline._load_dataset(cfg)
    if cfg.mask_type == "box":
        mask = pipeline.make_box_mask(cfg.model.height, cfg.model.width,
                                      cfg.mask_boxes, cfg.effective_mask_width, cfg.seed)
    else:
        mask = pipeline.make_disperse_mask(cfg.model.height, cfg.model.width, seed=cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    summary = pipeline.eval_inpainting(model, dataset.frames, mask,
                                       os.path.join(cfg.output_dir, "inpaint.csv"))
    print(f"input baseline {summary['input']:.2f} dB, model {summary['model']:.2f} dB")
    return 0


def _cmd_interp(args) -> int:
    cfg = _load_config(args)
    dataset = pipeline._load_dataset(cfg)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg.split = "even"
        model = pipeline.train(cfg).model
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = pipeline.eval_interpolation(model, dataset.frames,
                                       os.path.join(cfg.output_dir, "interp.csv"))
    mean_p = float(np.mean([p for _, p in rows]))
    print(f"interpolation psnr {mean_p:.2f} dB over {len(rows)} odd frames")
    return 0


def _cmd_rd_curve(args) -> int:
    cfg = _load_config(args)
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = pipeline.rd_curve(cfg, budgets, os.path.join(cfg.output_dir, "rd_curve.csv"))
    for r in rows:
        print(f"budget {r['budget']:>8}  {r['bpp']:.4f} bpp  {r['psnr']:.2f} dB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqnerv",
                                     description="vector-quantized neural video codec")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--output", "-o", help="run output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint", help="trained model checkpoint")

    common(sub.add_parser("train", help="overfit a model to a video"))
    common(sub.add_parser("encode", help="train/compress into a bitstream"), checkpoint=True)

    p = sub.add_parser("decode", help="decode a bitstream")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--output", "-o", default="decode_out")
    p.add_argument("--reference", help="frame directory to score against")
    p.add_argument("--dump-frames", action="store_true")

    p = sub.add_parser("eval", help="regression metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("inpaint", help="masked-input evaluation")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("interp", help="even/odd interpolation protocol")
    common(p, checkpoint=True)

    p = sub.add_parser("rd-curve", help="rate-distortion sweep over budgets")
    common(p)
    p.add_argument("--budgets", required=True, help="comma-separated parameter budgets")
    return parser


_HANDLERS = {
    "train": _cmd_train,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "inpaint": _cmd_inpaint,
    "interp": _cmd_interp,
    "rd-curve": _cmd_rd_curve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except VQNervError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
