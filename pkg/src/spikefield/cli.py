"""Command-line entry points.

Subcommands: train, extract, eval, gradcheck, make-scene. Human-readable
progress goes to stdout; failures additionally emit one structured JSON
object on stderr. Exit codes: 0 success, 2 invalid config/dataset/input,
3 training divergence, 4 empty mesh in evaluation, 5 failed gradient
check. Worker threads are capped by --threads or SPIKEFIELD_THREADS.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, gradcheck
from .errors import DivergenceError, InputError
from .field import FieldModel
from .geometry import (chamfer_distance, export_mesh, load_mesh,
                       marching_cubes, sample_density_grid,
                       sample_mesh_surface)
from .scenes import AnalyticShape, make_synthetic_scene, save_blender
from .trainer import PRESETS, Trainer, config_from_json

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_EMPTY_MESH = 4
EXIT_GRADCHECK = 5

_thread_limiter = None


def _limit_threads(n: int | None) -> None:
    global _thread_limiter
    if n is None:
        env = os.environ.get("SPIKEFIELD_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        _thread_limiter = threadpool_limits(limits=max(1, n))
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", str(max(1, n)))


def _error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message, **extra}
    print(json.dumps(payload), file=sys.stderr)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cmd_train(args) -> int:
    config = config_from_json(args.config, preset=args.preset)
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.ndjson"
    ckpt_path = out / "checkpoint.spkf"

    trainer = Trainer(config)
    print(f"training {config.schedule.total_iterations} iterations "
          f"({config.schedule.rounds} rounds of "
          f"{config.schedule.n_normal}+{config.schedule.n_spike}), "
          f"seed {config.seed}")
    reports = trainer.train(log_path=log_path, progress=not args.quiet)
    trainer.save_checkpoint(ckpt_path)

    config_bytes = Path(args.config).read_bytes()
    manifest = {
        "config_hash": _sha256(config_bytes),
        "input_hash": _sha256(config_bytes + str(config.scene).encode()),
        "seed": config.seed,
        "preset": args.preset or "full",
        "iterations": len(reports),
        "final_theta_th": reports[-1].theta_th if reports else
            float(trainer.params.view("theta_th")),
        "final_total_loss": reports[-1].total if reports else None,
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    theta = manifest["final_theta_th"]
    print(f"done: checkpoint {ckpt_path} (theta_th {theta:.5f})")
    return EXIT_OK


def cmd_extract(args) -> int:
    model, params = FieldModel.load(args.checkpoint)
    level = args.level if args.level is not None \
        else float(params.view("theta_th"))
    grid = sample_density_grid(model.density_fn(params), args.resolution,
                               (model.box_min, model.box_max))
    mesh = marching_cubes(grid, level)
    export_mesh(mesh, args.out)
    report = {"level": level, "resolution": args.resolution,
              "n_vertices": int(len(mesh.vertices)),
              "n_triangles": int(len(mesh.triangles)),
              "mesh": str(args.out)}
    if mesh.is_empty:
        report["warning"] = "no level-set crossings: empty mesh"
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh = load_mesh(args.mesh)
    if mesh.is_empty:
        _error("empty-mesh", f"{args.mesh} has no triangles; nothing to evaluate")
        print(json.dumps({"chamfer": None, "n_vertices": 0, "n_triangles": 0,
                          "level": args.level, "resolution": args.resolution}))
        return EXIT_EMPTY_MESH
    # each side gets its own identically-seeded stream, so evaluating a
    # mesh against itself is exactly zero
    pts = sample_mesh_surface(mesh, args.samples,
                              np.random.default_rng(args.seed))

    kind, _, spec_arg = args.reference.partition(":")
    if kind == "analytic":
        shape = AnalyticShape(spec_arg or "sphere")
        ref_pts = shape.surface_points(args.samples,
                                       np.random.default_rng(args.seed))
        from .geometry import nearest_distances
        side_a = float(shape.distance_to_surface(pts).mean())
        side_b = float(nearest_distances(ref_pts, pts).mean())
        chamfer = 0.5 * (side_a + side_b)
    elif kind == "mesh":
        ref_mesh = load_mesh(spec_arg)
        if ref_mesh.is_empty:
            raise InputError(f"reference mesh {spec_arg} is empty")
        ref_pts = sample_mesh_surface(ref_mesh, args.samples,
                                      np.random.default_rng(args.seed))
        chamfer = chamfer_distance(pts, ref_pts)
    else:
        raise InputError(
            f"reference must be analytic:<shape> or mesh:<path>, got "
            f"{args.reference!r}")

    report = {"chamfer": chamfer, "n_vertices": int(len(mesh.vertices)),
              "n_triangles": int(len(mesh.triangles)),
              "level": args.level, "resolution": args.resolution,
              "samples": args.samples, "reference": args.reference}
    print(json.dumps(report))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suites(seed=args.seed,
                                   inject_fault=args.inject_fault)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    if failed:
        _error("gradcheck", "gradient check failed",
               ops=[r.name for r in failed])
        return EXIT_GRADCHECK
    print("all gradient suites passed")
    return EXIT_OK


def cmd_make_scene(args) -> int:
    shape = AnalyticShape(args.shape)
    dataset = make_synthetic_scene(shape, n_views=args.views,
                                   image_size=args.size,
                                   rng=np.random.default_rng(args.seed),
                                   n_eval_views=args.eval_views)
    save_blender(dataset, args.out)
    print(f"wrote {len(dataset.cameras)} views "
          f"({len(dataset.train_views)} train) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikefield",
        description="grid radiance field trainer with a learnable spiking "
                    "density threshold")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (or SPIKEFIELD_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the round-robin trainer")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="marching cubes at the learned level set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=float, default=None,
                   help="override the checkpoint threshold")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("eval", help="Chamfer distance of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", required=True,
                   help="analytic:<shape> or mesh:<path>")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)  # harness self-test
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-scene", help="write a synthetic Blender-format scene")
    p.add_argument("--shape", choices=["sphere", "torus", "box"],
                   default="sphere")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--eval-views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_scene)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.fn(args)
    except InputError as exc:
        _error("input", str(exc))
        return EXIT_INPUT
    except DivergenceError as exc:
        _error("divergence", str(exc), stage=exc.stage, iteration=exc.iteration)
        return EXIT_DIVERGED
    except OSError as exc:
        _error("io", str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
