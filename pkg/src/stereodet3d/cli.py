"""Command-line interface.

Subcommands: priors, infer, gen-disparity, bench, evaluate, selftest.
Exit codes: 0 success, 2 input/format error, 3 invariant violation.

Expected dataset layout (KITTI object detection style):

    <root>/image_2/<frame>.png   left images (PNG or PPM)
    <root>/image_3/<frame>.png   right images
    <root>/calib/<frame>.txt     projection matrices P2/P3
    <root>/label_2/<frame>.txt   annotations (priors only)
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backend as _backend
from .anchors import AnchorPriors, compute_priors, generate_grid
from .bench import bench_cost_volumes, compare_backends, reports_to_json
from .config import ModelConfig
from .disparity import block_match, downscale_disparity
from .errors import EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, InputError, InvariantError
from .evaluation import evaluation_report
from .kitti import (
    load_image_pair,
    parse_calibration,
    parse_detections,
    parse_labels,
    read_image,
    rgb_to_luminance,
    save_disparity_png,
    write_detections,
)
from .model import StereoDetector, TransformRecord
from .weights import load_weights


def _frame_ids(root: Path, subdir: str) -> list[str]:
    folder = root / subdir
    if not folder.is_dir():
        raise InputError(f"{folder} is not a directory")
    ids = sorted(p.stem for p in folder.iterdir() if p.suffix in (".png", ".ppm"))
    if not ids:
        raise InputError(f"no images found under {folder}")
    return ids


def _find_image(root: Path, subdir: str, frame: str) -> Path:
    for suffix in (".png", ".ppm"):
        p = root / subdir / f"{frame}{suffix}"
        if p.exists():
            return p
    raise InputError(f"no image for frame {frame} under {root / subdir}")


def _cmd_priors(args) -> int:
    root = Path(args.data)
    config = ModelConfig()
    split_path = Path(args.split)
    if not split_path.exists():
        raise InputError(f"split file {split_path} does not exist")
    frames = [line.strip() for line in split_path.read_text().splitlines() if line.strip()]
    if not frames:
        raise InputError(f"split file {split_path} lists no frames")

    def dataset():
        for frame in frames:
            labels = parse_labels((root / "label_2" / f"{frame}.txt").read_text())
            calib = parse_calibration((root / "calib" / f"{frame}.txt").read_text())
            image = read_image(_find_image(root, "image_2", frame))
            height, width = image.shape[:2]
            record = TransformRecord(
                crop_top=config.crop_top,
                scale_x=config.input_w / width,
                scale_y=config.input_h / (height - config.crop_top),
                orig_h=height,
                orig_w=width,
            )
            transformed = [
                replace(a, box2d=record.apply_box(a.box2d)) for a in labels
            ]
            yield transformed, calib

    anchors = generate_grid(config.input_w, config.input_h, config.anchor_shapes())
    priors = compute_priors(
        dataset(), anchors, pos_iou=config.pos_iou, classes=config.classes
    )
    priors.save(args.out)
    usable = int(priors.usable().sum())
    print(f"priors written to {args.out} ({usable} usable (shape, class) cells)")
    return EXIT_OK


def _cmd_infer(args) -> int:
    root = Path(args.data)
    config = ModelConfig()
    archive = load_weights(args.weights)
    priors = AnchorPriors.load(args.priors)
    model = StereoDetector(config, archive)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = _frame_ids(root, "image_2")
    for frame in frames:
        pair = load_image_pair(
            _find_image(root, "image_2", frame), _find_image(root, "image_3", frame)
        )
        calib = parse_calibration((root / "calib" / f"{frame}.txt").read_text())
        result = model.detect(
            pair, calib, priors,
            score_threshold=args.score, nms_threshold=args.nms,
            emit_disparity=args.emit_disparity,
        )
        (out_dir / f"{frame}.txt").write_text(write_detections(result.detections))
        if args.emit_disparity and result.disparity_logits is not None:
            logits = result.disparity_logits[0]
            # argmax hypothesis index on the 1/4 grid, same unit convention
            # as the downscaled block-matching supervision targets
            disp = logits.argmax(axis=0).astype(np.float32)
            save_disparity_png(out_dir / f"{frame}_disparity.png", disp)
        print(f"{frame}: {len(result.detections)} detections "
              f"({result.dropped} dropped)")
    return EXIT_OK


def _cmd_gen_disparity(args) -> int:
    root = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in _frame_ids(root, "image_2"):
        left = rgb_to_luminance(read_image(_find_image(root, "image_2", frame)))
        right = rgb_to_luminance(read_image(_find_image(root, "image_3", frame)))
        result = block_match(left, right)
        if args.scale > 1:
            result = downscale_disparity(result, args.scale)
        save_disparity_png(out_dir / f"{frame}.png", result.values)
        valid = float((result.values >= 0).mean())
        print(f"{frame}: {valid:.1%} valid pixels")
    return EXIT_OK


def _parse_shape(text: str):
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise InputError(f"bad shape {text!r}: {exc}") from exc
    if len(shape) != 4:
        raise InputError(f"shape must have four extents BxCxHxW, got {text!r}")
    return shape


def _cmd_bench(args) -> int:
    shape = _parse_shape(args.shape)
    if args.threads:
        _backend.set_num_threads(args.threads)
    if args.backend == "both":
        reports = compare_backends(shape, args.max_disp, args.reps)
    else:
        reports = [
            bench_cost_volumes(
                shape, args.max_disp, args.reps, backend_name=args.backend
            )
        ]
    if args.json:
        print(reports_to_json(reports))
    else:
        for report in reports:
            print(report.render_text())
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    gt_dir, det_dir = Path(args.gt), Path(args.det)
    frames = sorted(p.stem for p in gt_dir.glob("*.txt"))
    if not frames:
        raise InputError(f"no ground-truth files under {gt_dir}")
    gts, dets = [], []
    for frame in frames:
        gts.append(parse_labels((gt_dir / f"{frame}.txt").read_text()))
        det_path = det_dir / f"{frame}.txt"
        dets.append(
            parse_detections(det_path.read_text()) if det_path.exists() else []
        )
    report = evaluation_report(
        gts, dets,
        iou_kind=args.kind, iou_threshold=args.iou, n_recall_points=args.points,
    )
    print(report, end="")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(verbose=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereodet3d",
        description="Stereo 3-D detection engine: priors, inference, "
        "disparity supervision, benchmark, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("priors", help="collect anchor statistics from labels")
    p.add_argument("--data", required=True, help="KITTI-style dataset root")
    p.add_argument("--split", required=True, help="text file listing frame ids")
    p.add_argument("--out", required=True, help="output priors JSON path")
    p.set_defaults(func=_cmd_priors)

    p = sub.add_parser("infer", help="run detection over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--score", type=float, default=0.75)
    p.add_argument("--nms", type=float, default=0.4)
    p.add_argument("--emit-disparity", action="store_true")
    p.add_argument("--out", required=True, help="output directory for detections")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gen-disparity", help="block-matching disparity maps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=1,
                   help="downscale factor for the stored maps (1 = full res)")
    p.set_defaults(func=_cmd_gen_disparity)

    p = sub.add_parser("bench", help="cost-volume construction benchmark")
    p.add_argument("--shape", default="1x64x72x320", help="BxCxHxW, e.g. 1x64x72x320")
    p.add_argument("--max-disp", type=int, default=96)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--json", action="store_true")
    p.add_argument("--backend", default="auto",
                   choices=("auto", "compiled", "reference", "both"))
    p.add_argument("--threads", type=int, default=0,
                   help="compiled-kernel threads (0 keeps the current setting)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("evaluate", help="average precision over detection files")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--det", required=True, help="detection directory")
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--kind", default="3d", choices=("2d", "bev", "3d"))
    p.add_argument("--points", type=int, default=40, choices=(11, 40))
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("selftest", help="oracle/invariant battery on synthetic data")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
