"""Batch command-line front end.

Five subcommands tie the pipeline together for scripted runs: ``render`` a
single frame, ``fly`` a waypoint list closed-loop, ``gen-dataset`` for the
randomization sweep, ``metrics`` for post-hoc scoring, and ``synth-scene``
to build procedural scenes. There is no interactive mode; progress and
performance stats go to stderr, data goes to files (or stdout for the
metrics report when no output path is given).

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .analysis import compute_metrics
from .config import Config, ConfigError, load_config
from .datagen import generate_dataset, read_states_csv, write_states_csv
from .dynamics import DroneParams, DroneState
from .expert import ExpertDivergence, closed_loop_run
from .flatness import DesiredTrajectory, Waypoint, min_snap, sample_trajectory
from .geom import Quat, RigidTransform
from .splat.ply import PlyError, load_ply, save_ply
from .splat.render import render
from .splat.scene import SplatScene, generate_synthetic_scene, primitives_from_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

__all__ = ["main"]


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _config_from_args(args: argparse.Namespace, overrides: dict[str, Any] | None = None) -> Config:
    merged = dict(overrides or {})
    if getattr(args, "scene", None) is not None:
        merged["scene.path"] = str(args.scene)
    if getattr(args, "out_dir", None) is not None:
        merged["output.dir"] = str(args.out_dir)
    if getattr(args, "seed", None) is not None:
        merged["randomization.seed"] = args.seed
    return load_config(args.config, merged)


def _load_scene(config: Config) -> SplatScene:
    if config.scene_path is None:
        raise ConfigError("this command needs a scene: set scene.path or pass --scene")
    return load_ply(config.scene_path, alignment=config.alignment, background=config.scene_background)


def _parse_pose(text: str) -> RigidTransform:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"pose must be numeric: {exc}") from exc
    if len(values) == 3:
        return RigidTransform(Quat.identity(), np.array(values))
    if len(values) == 7:
        quat = Quat(*values[3:])
        if abs(quat.norm() - 1.0) > 1e-6:
            raise ConfigError("pose quaternion (qx,qy,qz,qw) must have unit norm")
        return RigidTransform(quat, np.array(values[:3]))
    raise ConfigError("pose must be 'px,py,pz' or 'px,py,pz,qx,qy,qz,qw'")


def _read_waypoints(path: Path) -> list[Waypoint]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read waypoints file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot parse {path.name}: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get("waypoints", payload)
    if not isinstance(payload, list) or not payload:
        raise ConfigError("waypoints file must hold a non-empty list")
    waypoints = []
    for k, entry in enumerate(payload):
        if not isinstance(entry, dict):
            raise ConfigError(f"waypoint {k} must be an object")
        try:
            waypoints.append(
                Waypoint(
                    position=np.asarray(entry["position"], dtype=np.float64),
                    yaw=float(entry.get("yaw", 0.0)),
                    time=float(entry["time"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"waypoint {k} is malformed: {exc}") from exc
    return waypoints


def _trajectory_from_waypoints(path: Path, config: Config) -> DesiredTrajectory:
    waypoints = _read_waypoints(path)
    try:
        spline = min_snap(waypoints)
    except ValueError as exc:
        raise ConfigError(f"min-snap solve rejected the waypoints: {exc}") from exc
    return sample_trajectory(spline, config.control_rate, DroneParams())


def _trajectory_from_csv(path: Path) -> DesiredTrajectory:
    timestamps, states, inputs = read_states_csv(path)
    if states.shape[0] < 2:
        raise ValueError(f"{path.name} must hold at least two samples")
    steps = np.diff(timestamps)
    dt = float(steps[0])
    if dt <= 0.0 or np.max(np.abs(steps - dt)) > 1e-9:
        raise ValueError(f"{path.name} must be uniformly sampled in time")
    return DesiredTrajectory(states, inputs, dt, DroneParams())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_render(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    scene = _load_scene(config)
    pose = _parse_pose(args.pose)
    start = time.perf_counter()
    image = render(scene, pose, config.cam_from_body, config.intrinsics, workers=args.workers)
    elapsed = time.perf_counter() - start
    image.save(args.out)
    _log(f"rendered {image.width}x{image.height} ({len(scene)} gaussians) in {elapsed:.3f} s")
    return EXIT_OK


def cmd_fly(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    traj = _trajectory_from_waypoints(Path(args.waypoints), config)
    scene = _load_scene(config) if config.scene_path is not None else None
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    report: dict[str, Any] = {
        "seed": config.randomization.seed,
        "diverged": False,
        "config": config.to_dict(),
    }
    write_states_csv(out_dir / "desired.csv", traj.timestamps, traj.states, traj.inputs)

    _log(f"flying {traj.duration:.2f} s reference ({traj.n_steps} steps) ...")
    start = time.perf_counter()
    try:
        result = closed_loop_run(traj.state_at(0), DroneParams(), traj, traj.duration, config.mpc)
    except ExpertDivergence as exc:
        report["diverged"] = True
        report["divergence_step"] = exc.step_index
        report["error"] = str(exc)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _log(f"solver diverged: {exc}")
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - start
    _log(f"closed loop finished in {elapsed:.3f} s ({traj.n_steps / elapsed:.1f} steps/s)")

    write_states_csv(out_dir / "states.csv", traj.timestamps, result.states, result.inputs)

    n_frames = 0
    if scene is not None:
        frames_dir = out_dir / "frames"
        frames_dir.mkdir(exist_ok=True)
        start = time.perf_counter()
        for k in range(result.states.shape[0]):
            state = DroneState.from_array(result.states[k])
            pose = RigidTransform(state.orientation, state.position)
            image = render(scene, pose, config.cam_from_body, config.intrinsics, workers=args.workers)
            image.save(frames_dir / f"frame_{k:05d}.png")
            n_frames += 1
            if n_frames % 50 == 0:
                _log(f"rendered {n_frames}/{result.states.shape[0]} frames")
        elapsed = time.perf_counter() - start
        _log(f"rendered {n_frames} frames in {elapsed:.3f} s ({n_frames / elapsed:.1f} frames/s)")

    metrics = compute_metrics(result.states, traj, scene=scene)
    report["metrics"] = metrics.to_dict()
    report["frames"] = n_frames
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _log(f"tracking error {metrics.tracking_error:.4f} m, in-tube fraction {metrics.proximity_fraction:.3f}")
    return EXIT_OK


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    traj = _trajectory_from_waypoints(Path(args.waypoints), config)
    spec = config.randomization
    use_images = not args.no_images and config.scene_path is not None
    scene = _load_scene(config) if use_images else None

    progress: Callable[[str], None] | None = _log if args.verbose else None
    start = time.perf_counter()
    manifest = generate_dataset(
        traj,
        spec,
        config.mpc,
        config.output_dir,
        scene=scene,
        cam_from_body=config.cam_from_body if use_images else None,
        intrinsics=config.intrinsics if use_images else None,
        scene_path=config.scene_path if use_images else None,
        workers=args.workers,
        progress=progress,
    )
    elapsed = time.perf_counter() - start
    counts = manifest.data["counts"]
    _log(
        f"dataset: {counts['rollouts']}/{counts['attempted']} rollouts accepted, "
        f"{counts['pairs']} state-action pairs in {elapsed:.3f} s "
        f"({counts['rollouts'] / elapsed:.2f} rollouts/s, {counts['pairs'] / elapsed:.1f} pairs/s)"
    )
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    try:
        desired = _trajectory_from_csv(Path(args.desired))
        _, flown_states, _ = read_states_csv(Path(args.flown))
    except OSError as exc:
        raise ConfigError(f"cannot read states file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"states schema mismatch: {exc}") from exc
    scene = _load_scene(config) if config.scene_path is not None else None

    metrics = compute_metrics(flown_states, desired, scene=scene)
    report = {
        "seed": config.randomization.seed,
        "metrics": metrics.to_dict(),
        "config": config.to_dict(),
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    _log(f"tracking error {metrics.tracking_error:.4f} m over {flown_states.shape[0]} samples")
    return EXIT_OK


def cmd_synth_scene(args: argparse.Namespace) -> int:
    try:
        payload = json.loads(Path(args.primitives).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read primitives file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot parse primitives file: {exc}") from exc
    background = (0.0, 0.0, 0.0)
    if isinstance(payload, dict):
        background = tuple(payload.get("background", background))
        payload = payload.get("primitives", [])
    try:
        primitives = primitives_from_json(payload)
        scene = generate_synthetic_scene(primitives, args.density, args.seed, background=background)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad primitive spec: {exc}") from exc
    save_ply(scene, args.out)
    _log(f"wrote {len(scene)} gaussians (seed {args.seed}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatflight",
        description="Gaussian-splat flight simulation and dataset synthesis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, seed: bool = True) -> None:
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON config file")
        p.add_argument("--scene", type=Path, default=None, help="override scene.path")
        p.add_argument("--workers", type=int, default=None, help="parallel workers (default: all cores)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override randomization.seed")

    p = sub.add_parser("render", help="render one frame from a body pose")
    common(p, seed=False)
    p.add_argument("--pose", required=True, help="'px,py,pz' or 'px,py,pz,qx,qy,qz,qw'")
    p.add_argument("--out", type=Path, required=True, help="output image (.png or .ppm)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fly", help="track a waypoint file closed-loop and score it")
    common(p)
    p.add_argument("--waypoints", type=Path, required=True, help="JSON waypoint list")
    p.add_argument("--out-dir", type=Path, default=None, help="override output.dir")
    p.set_defaults(func=cmd_fly)

    p = sub.add_parser("gen-dataset", help="domain-randomized expert dataset")
    common(p)
    p.add_argument("--waypoints", type=Path, required=True, help="JSON waypoint list")
    p.add_argument("--out-dir", type=Path, default=None, help="override output.dir")
    p.add_argument("--no-images", action="store_true", help="skip frame rendering")
    p.add_argument("--verbose", action="store_true", help="log every rollout")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("metrics", help="score a flown states.csv against a desired one")
    common(p, seed=True)
    p.add_argument("--flown", type=Path, required=True)
    p.add_argument("--desired", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="report path (default: stdout)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth-scene", help="generate a procedural scene PLY")
    p.add_argument("--primitives", type=Path, required=True, help="JSON primitive list")
    p.add_argument("--density", type=float, default=200.0, help="gaussians per square meter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output .ply path")
    p.set_defaults(func=cmd_synth_scene)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except PlyError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except ExpertDivergence as exc:
        _log(f"solver diverged: {exc}")
        return EXIT_RUNTIME
    except OSError as exc:
        _log(f"runtime failure: {exc}")
        return EXIT_RUNTIME
    except (ValueError, RuntimeError) as exc:
        _log(f"runtime failure: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
