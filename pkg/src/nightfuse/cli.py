"""Umbrella command-line interface wiring the pipeline stages together.

Exit codes: 0 success, 1 data or I/O error (diagnostic on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .content import ContentParams, extract_content
from .core import ParseError, PipelineError
from .fileio import (
    _CONFIG_KEYS,
    build_settings,
    load_eval_split,
    load_events,
    load_source_samples,
    load_target_samples,
    parse_manifest,
    read_calibration,
    read_config,
    read_depth_map,
    read_gray_image,
    read_label_mask,
    save_params,
    write_config,
    write_gray_image,
    write_iou_report,
    write_label_mask,
    write_metrics_log,
    write_scenario,
    write_signed_map,
    write_signed_map_viz,
    write_voxel_grid,
)
from .metrics import CLASS_SCHEMAS, ConfusionMatrix, format_percent, iou_per_class, miou
from .motion import FilterParams, extract_motion
from .trainer import make_synthetic_scenario, train
from .voxel import WindowSpec, collapse_to_map, select_window, voxelize

VERSION_TEXT = f"nightfuse {__version__} (file formats v1: CMDA/CMDV/CMDZ/CMDP)"


def _resolve_seed(args, fallback: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if getattr(args, "global_seed", None) is not None:
        return args.global_seed
    return fallback


def cmd_extract_motion(args) -> int:
    prev = read_gray_image(args.prev)
    curr = read_gray_image(args.curr)
    params = FilterParams(args.alpha, args.beta, args.epsilon)
    result = extract_motion(prev, curr, params)
    write_signed_map(result, args.out)
    if args.viz:
        write_signed_map_viz(result, args.viz)
    return 0


def _parse_fixed_shift(text: str, gamma: int):
    parts = text.split(",")
    if len(parts) != 2:
        raise ParseError(f"--fixed-shift expects 'dx,dy', got {text!r}")
    try:
        dx, dy = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"--fixed-shift expects integers, got {text!r}")
    if abs(dx) != gamma or abs(dy) != gamma:
        raise ParseError(f"--fixed-shift magnitudes must equal gamma={gamma}, got {text!r}")
    return dx, dy


def cmd_extract_content(args) -> int:
    img = read_gray_image(args.input)
    params = ContentParams(args.gamma, FilterParams(args.alpha, args.beta, args.epsilon),
                           _resolve_seed(args))
    fixed = _parse_fixed_shift(args.fixed_shift, args.gamma) if args.fixed_shift else None
    result = extract_content(img, params, fixed_shift=fixed)
    write_signed_map(result, args.out)
    if args.viz:
        write_signed_map_viz(result, args.viz)
    return 0


def cmd_voxelize(args) -> int:
    stream = load_events(args.events, args.width, args.height)
    window = select_window(stream, WindowSpec(args.anchor_ts, args.duration_us))
    grid = voxelize(window, args.bins, args.width, args.height)
    write_voxel_grid(grid, args.out)
    if args.collapse:
        write_signed_map(collapse_to_map(grid), args.collapse)
    print(f"{len(window)} events -> {args.bins}x{args.height}x{args.width} grid "
          f"(sum {grid.data.sum():.6f})")
    return 0


def cmd_warp(args) -> int:
    from .warp import warp_labels, warp_to_event_frame

    image = read_gray_image(args.image)
    depth = read_depth_map(args.depth)
    k_src, k_dst, transform = read_calibration(args.calib)
    out_size = (args.width, args.height)
    result = warp_to_event_frame(image, depth, k_src, k_dst, transform, out_size)
    write_gray_image(result.image, args.out)
    if args.labels:
        if not args.labels_out:
            raise ParseError("--labels requires --labels-out")
        mask = read_label_mask(args.labels, args.classes)
        write_label_mask(warp_labels(mask, depth, k_src, k_dst, transform, out_size),
                         args.labels_out)
    print(f"warped {result.valid.sum()} / {args.width * args.height} target pixels")
    return 0


def cmd_train(args) -> int:
    values = read_config(args.config) if args.config else {}
    for key in _CONFIG_KEYS:
        override = getattr(args, key.replace("-", "_"), None)
        if override is not None:
            values[key] = str(override)
    settings = build_settings(values)

    source = load_source_samples(parse_manifest(args.source_manifest), settings,
                                 settings.train.dims.classes)
    target = load_target_samples(parse_manifest(args.target_manifest), settings)
    eval_samples = eval_labels = None
    if args.eval_manifest:
        eval_samples, eval_labels = load_eval_split(parse_manifest(args.eval_manifest),
                                                    settings, settings.train.dims.classes)

    result = train(settings.train, source, target, eval_samples, eval_labels)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(result.student, out_dir / "student.ckpt")
    save_params(result.teacher, out_dir / "teacher.ckpt")
    write_metrics_log(result.log, out_dir / "metrics.tsv")
    from .report import save_iou_chart, save_training_curves

    save_training_curves(result.log, out_dir / "training_curves.png")
    last = result.log.steps[-1] if result.log.steps else None
    if last is not None:
        tgt = "-" if last.loss_target is None else f"{last.loss_target:.4f}"
        print(f"finished {settings.train.iterations} steps "
              f"(final loss_source={last.loss_source:.4f}, loss_target={tgt})")
    if eval_samples is not None:
        from .trainer import predict

        classes = settings.train.dims.classes
        names = [f"class-{i}" for i in range(classes)]
        cm = ConfusionMatrix(classes)
        for sample, gt in zip(eval_samples, eval_labels):
            cm.add(gt, predict(result.student, sample.image, sample.events, "fused"))
        write_iou_report(names, cm, out_dir)
        save_iou_chart(names, list(iou_per_class(cm)), miou(cm), out_dir / "iou_report.png")
        print(f"final fused MIoU on eval split: {format_percent(miou(cm))}%")
    return 0


def _schema_names(spec_text: str):
    if spec_text in CLASS_SCHEMAS:
        return CLASS_SCHEMAS[spec_text]
    try:
        count = int(spec_text)
    except ValueError:
        known = ", ".join(sorted(CLASS_SCHEMAS))
        raise ParseError(f"--classes must be a count or one of: {known}")
    return [f"class-{i}" for i in range(count)]


def cmd_eval(args) -> int:
    names = _schema_names(args.classes)
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    preds = sorted(p for p in pred_dir.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not preds:
        raise ParseError(f"{pred_dir}: no .pgm or .png prediction masks found")
    cm = ConfusionMatrix(len(names))
    for pred_path in preds:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise ParseError(f"missing ground truth for {pred_path.name}")
        cm.add(read_label_mask(gt_path, len(names)), read_label_mask(pred_path, len(names)))

    out_dir = Path(args.out_dir)
    record = write_iou_report(names, cm, out_dir)
    from .report import save_iou_chart

    iou = iou_per_class(cm)
    save_iou_chart(names, list(iou), miou(cm), out_dir / "iou_report.png")
    print((out_dir / "iou_report.txt").read_text(encoding="utf-8"), end="")
    print(f"({record['evaluated_pixels']} pixels evaluated)")
    return 0


def cmd_make_synthetic(args) -> int:
    scenario = make_synthetic_scenario(
        _resolve_seed(args, 7), args.n_source, args.n_target, n_eval=args.n_eval,
        width=args.width, height=args.height, num_classes=args.classes,
    )
    out_dir = Path(args.out)
    write_scenario(scenario, out_dir)
    write_config({
        "classes": scenario.num_classes,
        "iterations": 2500,
        "batch_size": 2,
        "lr": 1.0,
        "sigma": 0.995,
        "target_warmup": 400,
        "conf_threshold": 0.9,
        "eval_interval": 500,
        "seed": _resolve_seed(args, 7),
    }, out_dir / "config.txt")
    print(f"wrote {len(scenario.source)} source / {len(scenario.target)} target / "
          f"{len(scenario.eval_samples)} eval samples to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightfuse",
        description="Image/event preprocessing, self-training, and MIoU evaluation",
    )
    parser.add_argument("--version", action="version", version=VERSION_TEXT)
    parser.add_argument("--seed", dest="global_seed", type=int, default=None,
                        help="default seed for subcommands that accept one")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-motion", help="pseudo-events from two adjacent frames")
    p.add_argument("--prev", required=True)
    p.add_argument("--curr", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", default=None, help="optional 8-bit visualization path")
    p.set_defaults(func=cmd_extract_motion)

    p = sub.add_parser("extract-content", help="content map from one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--gamma", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fixed-shift", default=None, metavar="DX,DY",
                   help="pin the shift signs, e.g. +1,-1")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--viz", default=None)
    p.set_defaults(func=cmd_extract_content)

    p = sub.add_parser("voxelize", help="bin an event window into a voxel grid")
    p.add_argument("--events", required=True)
    p.add_argument("--anchor-ts", type=int, required=True)
    p.add_argument("--duration-us", type=int, default=50_000)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--out", required=True)
    p.add_argument("--collapse", default=None, help="also write the collapsed signed map")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("warp", help="depth-warp an image into the event camera frame")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--labels-out", default=None)
    p.add_argument("--classes", type=int, default=18)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("train", help="run the self-training loop from manifests")
    p.add_argument("--config", default=None)
    p.add_argument("--source-manifest", required=True)
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--out-dir", required=True)
    for key in sorted(_CONFIG_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       help=f"override config key {key}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MIoU of predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", required=True,
                   help="schema name (night-street-18, cityscapes-19) or class count")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-synthetic", help="generate the synthetic day/night datasets")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-source", type=int, default=200)
    p.add_argument("--n-target", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.set_defaults(func=cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as err:
        print(f"nightfuse: error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"nightfuse: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
