"""Command-line surface: scene generation, pre-training, rendering,
mesh extraction, evaluation, and the gradcheck gate.

Options can come from a ``key = value`` config file (# comments allowed);
command-line flags override file values, and every run echoes its
effective configuration into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import checks, mesh, train
from .camera import CameraIntrinsics
from .imageio import write_pfm, write_ppm
from .scene import load_dataset, make_ring_poses, read_scene_file, write_dataset
from .volume import encode_points  # noqa: F401  (re-exported for scripting)

_PRESETS = {
    "sphere": (
        "scene-version 1\n"
        "bounds -1 -1 -1 1 1 1\n"
        "sphere 0.0 0.0 0.0 0.5 0.8 0.23921568627450981 0.23921568627450981\n"
    ),
    "two-prim": (
        "scene-version 1\n"
        "bounds -1 -1 -1 1 1 1\n"
        "sphere -0.3 0.12 0.05 0.42 0.8 0.23921568627450981 0.2\n"
        "box 0.42 -0.3 -0.12 0.3 0.26 0.3 0.2 0.4 0.8\n"
    ),
}


def _read_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise SystemExit(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = val.strip()
    return values


def _build_train_config(args):
    values = {}
    if args.config:
        values.update(_read_config_file(args.config))
    for field in dataclasses.fields(train.TrainConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = flag
    try:
        return train.config_from_text(
            "\n".join(f"{k} = {v}" for k, v in values.items())
        )
    except (ValueError, TypeError) as e:
        raise SystemExit(f"bad configuration: {e}")


def _echo_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(train._config_text(config))


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    for field in dataclasses.fields(train.TrainConfig):
        name = "--" + field.name.replace("_", "-")
        p.add_argument(name, dest=field.name, default=None, metavar="V")


def cmd_gen_scene(args):
    if bool(args.scene) == bool(args.preset):
        raise SystemExit("gen-scene needs exactly one of --scene or --preset")
    if args.preset:
        if args.preset not in _PRESETS:
            raise SystemExit(f"unknown preset {args.preset!r}; have {sorted(_PRESETS)}")
        os.makedirs(args.out, exist_ok=True)
        tmp = os.path.join(args.out, "scene_input.txt")
        with open(tmp, "w") as f:
            f.write(_PRESETS[args.preset])
        scene_path = tmp
    else:
        scene_path = args.scene
    try:
        scene = read_scene_file(scene_path)
    except ValueError as e:
        raise SystemExit(str(e))
    size = args.size
    focal = 0.5 * size / np.tan(np.radians(args.fov_deg) / 2.0)
    intr = CameraIntrinsics(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, size, size)
    center = 0.5 * (scene.box_min + scene.box_max)
    poses = make_ring_poses(
        center, args.radius, args.height, args.views, np.radians(args.start_angle_deg)
    )
    write_dataset(scene, intr, poses, args.out)
    print(f"wrote {args.views} views to {args.out}")
    return 0


def cmd_pretrain(args):
    config = _build_train_config(args)
    if not args.dataset or not args.out:
        raise SystemExit("pretrain needs --dataset and --out")
    _echo_config(config, args.out)
    resume = None
    if args.resume:
        resume = train.load_checkpoint(args.resume)
    try:
        state, log_lines = train.train(args.dataset, config, out_dir=args.out, resume=resume)
    except (train.TrainError, ValueError) as e:
        raise SystemExit(f"pretrain failed: {e}")
    print(f"trained {len(log_lines)} steps; checkpoint in {args.out}")
    if log_lines:
        print("final:", log_lines[-1])
    return 0


def _load_state(args):
    if not args.checkpoint or not os.path.isfile(args.checkpoint):
        raise SystemExit(f"checkpoint not found: {args.checkpoint}")
    try:
        return train.load_checkpoint(args.checkpoint)
    except train.CheckpointError as e:
        raise SystemExit(f"bad checkpoint: {e}")


def cmd_render(args):
    state = _load_state(args)
    dataset = args.dataset or _dataset_from_state(args)
    try:
        color, depth = train.render_view(state, dataset, args.view)
    except ValueError as e:
        raise SystemExit(str(e))
    os.makedirs(args.out, exist_ok=True)
    write_ppm(color, os.path.join(args.out, f"render_{args.view:03d}.ppm"))
    write_pfm(depth, os.path.join(args.out, f"render_{args.view:03d}.pfm"))
    print(f"wrote render_{args.view:03d}.ppm/.pfm to {args.out}")
    return 0


def _dataset_from_state(args):
    raise SystemExit("--dataset is required (checkpoints do not store dataset paths)")


def cmd_extract_mesh(args):
    state = _load_state(args)
    if not args.dataset:
        raise SystemExit("extract-mesh needs --dataset to rebuild the feature volume")
    try:
        scene, frames = load_dataset(args.dataset)
    except ValueError as e:
        raise SystemExit(str(e))
    from . import autodiff as ad
    from .camera import build_cloud

    cloud = build_cloud(
        frames[: state.config.n_views],
        state.config.target_points,
        seed=train._rng(state.config.seed, 0),
    )
    with ad.no_grad():
        pyramid = state.build_pyramid(cloud)
    tri_mesh, _ = mesh.extract_mesh(state.field, pyramid, args.resolution)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    mesh.export_obj(tri_mesh, args.out)
    print(f"wrote {len(tri_mesh)} triangles to {args.out}")
    return 0


def cmd_eval(args):
    state = _load_state(args)
    if not args.dataset:
        raise SystemExit("eval needs --dataset")
    views = [int(v) for v in args.views.split(",")] if args.views else [0]
    try:
        metrics, _ = train.evaluate(state, args.dataset, views)
    except ValueError as e:
        raise SystemExit(str(e))
    for v in views:
        print(f"view {v}: psnr = {metrics['psnr'][v]:.6f} dB, depth_rmse = {metrics['depth_rmse'][v]:.9g}")
    print(f"mean: psnr = {metrics['mean_psnr']:.6f} dB, depth_rmse = {metrics['mean_depth_rmse']:.9g}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w") as f:
            for v in views:
                f.write(
                    f"view {v} psnr {metrics['psnr'][v]:.17g} depth_rmse {metrics['depth_rmse'][v]:.17g}\n"
                )
            f.write(f"mean psnr {metrics['mean_psnr']:.17g} depth_rmse {metrics['mean_depth_rmse']:.17g}\n")
    return 0


def cmd_gradcheck(args):
    results = checks.run_gradcheck_suite(verbose=True)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pointrender",
        description="Point-cloud pre-training via differentiable SDF volume rendering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render an analytic scene to an RGB-D dataset")
    p.add_argument("--scene", help="scene description file")
    p.add_argument("--preset", help=f"built-in scene: {', '.join(sorted(_PRESETS))}")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--fov-deg", type=float, default=60.0)
    p.add_argument("--radius", type=float, default=2.4)
    p.add_argument("--height", type=float, default=1.2)
    p.add_argument("--start-angle-deg", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("pretrain", help="run the rendering pre-training loop")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract-mesh", help="marching-cubes surface from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("eval", help="PSNR / depth RMSE on chosen views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--views", help="comma-separated view ids (default 0)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gate")
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
