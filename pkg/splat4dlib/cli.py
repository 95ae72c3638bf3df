from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys

from .exceptions import Splat4dError
from .photo import LossWeights, load_loss_weights
from .pipeline import EVALUATION_HEADER, METRIC_HEADER, ScenePipeline
from .utils import csv_text, parse_float_triplet, parse_key_values, resolve_threads

OFFSET_KEYS = ("dx", "dy", "dz")


def _parse_offset(items: list[str] | None) -> tuple[float, float, float]:
    parsed = parse_key_values(items)
    unknown = sorted(set(parsed) - set(OFFSET_KEYS))
    if unknown:
        raise ValueError(f"Unknown ego offset keys {unknown}. Expected dx, dy or dz.")
    dx, dy, dz = (float(parsed.get(key, 0.0)) for key in OFFSET_KEYS)
    return dx, dy, dz


def _cmd_synth(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    spec_path = Path(args.spec) if args.spec else None
    manifest_path = pipeline.synth(Path(args.out), spec_path)
    print(json.dumps({"manifest_path": str(manifest_path), "seed": pipeline.seed}, indent=2))
    return 0


def _cmd_build(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    summary = pipeline.build(Path(args.scene), Path(args.out))
    print(json.dumps(summary.to_dict(), indent=2))
    return 0


def _cmd_fuse(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    frames_dir = Path(args.frames) if args.frames else None
    summary = pipeline.fuse(Path(args.scene), Path(args.out), frames_dir=frames_dir)
    print(json.dumps(summary.to_dict(), indent=2))
    return 0


def _cmd_render(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    output = pipeline.render(
        Path(args.segments),
        time=args.time,
        camera_id=args.camera,
        out=Path(args.out),
        ego_offset=_parse_offset(args.ego_offset),
        background=parse_float_triplet(args.background),
        dynamic_only=args.dynamic_only,
        depth_out=Path(args.depth_out) if args.depth_out else None,
    )
    diagnostics = output.diagnostics
    payload = {
        "out": str(args.out),
        "time": args.time,
        "camera": args.camera,
        "kernels": diagnostics.kernels_in,
        "culled_behind": diagnostics.culled_behind,
        "skipped_singular": diagnostics.skipped_singular,
        "tile_pairs": diagnostics.tile_pairs,
        "coverage": float((output.alpha > 0.5).mean()),
    }
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_warp_eval(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    weights = load_loss_weights(Path(args.weights)) if args.weights else LossWeights()
    summary = pipeline.warp_eval(
        Path(args.scene),
        target_time=args.target,
        source_time=args.source,
        camera_id=args.camera,
        out_dir=Path(args.out),
        weights=weights,
    )
    print(json.dumps(summary.to_dict(), indent=2))
    return 0


def _cmd_metrics(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    rows = pipeline.metrics(Path(args.pred), Path(args.gt), out=Path(args.out) if args.out else None)
    sys.stdout.write(csv_text(METRIC_HEADER, rows))
    return 0


def _cmd_evaluate(args: argparse.Namespace, pipeline: ScenePipeline) -> int:
    rows = pipeline.evaluate(
        Path(args.scene), Path(args.segments), out=Path(args.out) if args.out else None
    )
    sys.stdout.write(csv_text(EVALUATION_HEADER, rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splat4d",
        description="Build, fuse and render feed-forward 4D Gaussian scenes.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (default: available cores).",
    )
    parser.add_argument("--seed", type=int, default=0, help="Seed for synthetic attribute maps.")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Log verbosity on stderr (default: WARNING).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write a synthetic scene manifest and rasters.")
    synth.add_argument("--spec", default=None, help="Synthetic scene spec JSON (default: built-in scene).")
    synth.add_argument("--out", required=True, help="Output directory.")

    build = sub.add_parser("build", help="Build per-frame Gaussian archives with flow applied.")
    build.add_argument("--scene", required=True, help="Scene manifest (scene.json).")
    build.add_argument("--out", required=True, help="Directory for frame archives.")

    fuse = sub.add_parser("fuse", help="Align, fuse and aggregate context frames into segments.")
    fuse.add_argument("--scene", required=True, help="Scene manifest (scene.json).")
    fuse.add_argument(
        "--frames",
        default=None,
        help="Frame archives written by 'build' (default: build from the manifest).",
    )
    fuse.add_argument("--out", required=True, help="Directory for segment archives.")

    render = sub.add_parser("render", help="Render the scene at a time and camera.")
    render.add_argument("--segments", required=True, help="Directory written by 'fuse'.")
    render.add_argument("--time", type=float, required=True, help="Render time in seconds.")
    render.add_argument("--camera", required=True, help="Camera id.")
    render.add_argument(
        "--ego-offset",
        action="append",
        help="Ego displacement as dx=..,dy=..,dz=.. in meters (ego y is left).",
    )
    render.add_argument("--background", default="0,0,0", help="Background color r,g,b in [0, 1].")
    render.add_argument("--dynamic-only", action="store_true", help="Render dynamic kernels only.")
    render.add_argument("--depth-out", default=None, help="Optional depth raster output.")
    render.add_argument("--out", required=True, help="Output PPM image.")

    warp_eval = sub.add_parser("warp-eval", help="Warp a source frame into a target frame and score it.")
    warp_eval.add_argument("--scene", required=True, help="Scene manifest (scene.json).")
    warp_eval.add_argument("--target", type=float, required=True, help="Target timestamp.")
    warp_eval.add_argument("--source", type=float, required=True, help="Source timestamp.")
    warp_eval.add_argument("--camera", required=True, help="Camera id.")
    warp_eval.add_argument("--weights", default=None, help="Loss weights JSON.")
    warp_eval.add_argument("--out", required=True, help="Output directory.")

    metrics = sub.add_parser("metrics", help="PSNR/SSIM table for predicted vs ground-truth images.")
    metrics.add_argument("--pred", required=True, help="Directory of predicted PPM images.")
    metrics.add_argument("--gt", required=True, help="Directory of ground-truth PPM images.")
    metrics.add_argument("--out", default=None, help="Optional CSV output path.")

    evaluate = sub.add_parser("evaluate", help="Score reconstruction and novel-view frames of a scene.")
    evaluate.add_argument("--scene", required=True, help="Scene manifest (scene.json).")
    evaluate.add_argument("--segments", required=True, help="Directory written by 'fuse'.")
    evaluate.add_argument("--out", default=None, help="Optional CSV output path.")

    return parser


COMMANDS = {
    "synth": _cmd_synth,
    "build": _cmd_build,
    "fuse": _cmd_fuse,
    "render": _cmd_render,
    "warp-eval": _cmd_warp_eval,
    "metrics": _cmd_metrics,
    "evaluate": _cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        pipeline = ScenePipeline(threads=resolve_threads(args.threads), seed=args.seed)
        return COMMANDS[args.command](args, pipeline)
    except (Splat4dError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
