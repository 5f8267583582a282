"""Command-line entry point: synth, map, render, mesh, eval.

Exit status is 0 on success, 1 for bad input or files, 2 for numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .core import CameraIntrinsics
from .datasets import (
    ground_truth_mesh,
    load_sequence,
    read_intrinsics,
    read_poses,
    scene_from_config,
    sequence_length,
    write_color,
    write_depth,
    write_sequence,
)
from .errors import InputError, NumericalError
from .mapper import EARLY_STOP_POLICIES, KEYFRAME_STRATEGIES, Mapper, append_run_log
from .meshing import extract_mesh, read_ply, write_ply
from .metrics import accuracy_completion, image_metrics
from .network import HybridModel

log = logging.getLogger("hybridmap")

CHECKPOINT = "checkpoint.bin"
RUN_LOG = "run_log.jsonl"
SUMMARY = "summary.json"
GT_MESH = "gt_mesh.ply"


def cmd_synth(args) -> int:
    scene = scene_from_config(args.scene)
    out = Path(args.out)
    n = write_sequence(scene, out)
    write_ply(out / GT_MESH, ground_truth_mesh(scene, cell=args.cell))
    lo, hi = scene.encoding_bounds()
    (out / "bounds.json").write_text(json.dumps({"lo": lo.tolist(), "hi": hi.tolist()}) + "\n")
    print(f"wrote {n} frames and {GT_MESH} to {out}")
    return 0


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train = cfg.train
    if args.no_priors:
        train = replace(train, use_priors=False)
    if args.no_expansion:
        train = replace(train, use_expansion=False)
    if args.keyframe_strategy:
        train = replace(train, keyframe_strategy=args.keyframe_strategy)
    if args.early_stop:
        train = replace(train, early_stop=args.early_stop)
    if args.rays:
        train = replace(train, rays_per_iter=args.rays)
    if args.max_iters:
        train = replace(train, max_iters=args.max_iters)
    cfg.train = train
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _sequence_bounds(seq: Path):
    path = seq / "bounds.json"
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    return np.array(data["lo"]), np.array(data["hi"])


def cmd_map(args) -> int:
    cfg = _run_config(args)
    seq = Path(args.sequence)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_log = out / RUN_LOG
    run_log.write_text("")
    n_total = sequence_length(seq)
    n = n_total if args.frames is None else min(args.frames, n_total)

    model = HybridModel(cfg.model, bounds=_sequence_bounds(seq), seed=cfg.seed)
    mapper = Mapper(model, cfg.train, cfg.optimizer, seed=cfg.seed)
    intrinsics = None
    t0 = time.perf_counter()
    for i, frame in enumerate(load_sequence(seq)):
        if i >= n:
            break
        intrinsics = frame.intrinsics
        report = mapper.process_frame(frame)
        append_run_log(run_log, {"type": "frame", **report.record()})
        log.info("frame %d: %d iterations, total loss %.5f", report.frame_id, report.iterations,
                 report.losses.get("total", float("nan")))
    elapsed = time.perf_counter() - t0

    reports = mapper.reports
    summary = {
        "frames": len(reports),
        "total_time_s": elapsed,
        "mean_iterations": float(np.mean([r.iterations for r in reports])) if reports else 0.0,
        "mean_fpt_s": float(np.mean([r.timings["total"] for r in reports])) if reports else 0.0,
        "num_leaves": model.octree.num_leaves,
        "num_keyframes": len(mapper.keyframes),
        "config": {"model": asdict(cfg.model), "train": asdict(cfg.train), "seed": cfg.seed},
    }
    append_run_log(run_log, {"type": "summary", **summary})
    (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    extra = {"intrinsics": None if intrinsics is None else asdict(intrinsics)}
    save_checkpoint(out / CHECKPOINT, model, extra)
    print(f"mapped {len(reports)} frames in {elapsed:.1f} s, mean {summary['mean_iterations']:.2f} iterations/frame")
    return 0


def _checkpoint_path(path) -> Path:
    p = Path(path)
    return p / CHECKPOINT if p.is_dir() else p


def cmd_render(args) -> int:
    ckpt = _checkpoint_path(args.checkpoint)
    model = load_checkpoint(ckpt)
    poses = read_poses(Path(args.poses))
    if args.intrinsics:
        intr = read_intrinsics(Path(args.intrinsics))
    else:
        header, _ = read_checkpoint(ckpt)
        stored = header.get("extra", {}).get("intrinsics")
        if stored is None:
            raise InputError("checkpoint has no intrinsics; pass --intrinsics")
        intr = CameraIntrinsics(**stored)
    out = Path(args.out)
    (out / "color").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    from .renderer import render_image

    for i, pose in enumerate(poses):
        color, depth = render_image(model, pose, intr, args.step)
        write_color(out / "color" / f"{i:06d}.png", color)
        write_depth(out / "depth" / f"{i:06d}.png", depth)
    print(f"rendered {len(poses)} views to {out}")
    return 0


def cmd_mesh(args) -> int:
    model = load_checkpoint(_checkpoint_path(args.checkpoint))
    mesh = extract_mesh(model, cell=args.cell, with_color=args.color)
    write_ply(args.out, mesh)
    print(f"wrote {mesh.num_vertices} vertices, {mesh.num_faces} triangles to {args.out}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    gt = Path(args.gt)
    model = load_checkpoint(run / CHECKPOINT)
    frames = list(load_sequence(gt))[:: args.every]
    mesh = extract_mesh(model)
    metrics = image_metrics(model, frames, mesh=mesh)
    gt_mesh = read_ply(gt / GT_MESH)
    metrics.update(accuracy_completion(mesh, gt_mesh, args.samples, region=model.octree, seed=args.seed))
    text = "".join(f"{k} = {v:.6f}\n" for k, v in metrics.items())
    (run / "metrics.txt").write_text(text)
    append_run_log(run / RUN_LOG, {"type": "metrics", **metrics})
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridmap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RGB-D sequence and its ground-truth mesh")
    p.add_argument("scene", help="preset name (default, wall, alcove) or JSON scene config")
    p.add_argument("out")
    p.add_argument("--cell", type=float, default=0.01, help="ground-truth mesh cell size (m)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map", help="run online mapping over a sequence")
    p.add_argument("sequence")
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="process only the first N frames")
    p.add_argument("--rays", type=int, help="rays per iteration")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--no-priors", action="store_true")
    p.add_argument("--no-expansion", action="store_true")
    p.add_argument("--keyframe-strategy", choices=KEYFRAME_STRATEGIES)
    p.add_argument("--early-stop", choices=EARLY_STOP_POLICIES)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("render", help="render color and depth images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("poses")
    p.add_argument("out")
    p.add_argument("--intrinsics")
    p.add_argument("--step", type=float, default=0.01)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract a PLY mesh from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--color", action="store_true")
    p.add_argument("--cell", type=float)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="compute image and mesh metrics for a run")
    p.add_argument("run")
    p.add_argument("gt")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--every", type=int, default=1, help="evaluate every n-th training view")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
