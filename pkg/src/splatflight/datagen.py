"""Domain-randomized demonstration synthesis and dataset persistence.

For every trajectory step i and sample j, an independent RNG stream seeded by
(seed, i, j) draws model parameters uniformly between the bounds and an
initial state inside the perturbation box around the step's reference state.
The tracking expert — privileged with the drawn parameters — flies the
trajectory for the rollout duration; optionally each visited state is
rendered from the body-mounted camera. Rollouts are independent work items,
so results are identical for any worker count: files live under per-rollout
paths and the manifest is assembled in (i, j) order after all workers finish.

On disk: ``manifest.json`` (sorted keys), per-rollout
``rollouts/rollout_{i}_{j}/states.csv`` (t, position, velocity, quaternion,
thrust, body rates; the last row carries NaN inputs since a rollout has one
more state than input), and ``images/rollout_{i}_{j}/frame_{k}.png``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import numpy.typing as npt

from .dynamics import DroneParams, DroneState
from .expert import ExpertDivergence, MpcConfig, closed_loop_run
from .flatness import DesiredTrajectory
from .geom import CameraIntrinsics, Quat, RigidTransform, quat_multiply
from .splat.render import Image, render
from .splat.scene import SplatScene

DoubleMatrix = npt.NDArray[np.float64]

MANIFEST_FORMAT_VERSION = 1
STATES_CSV_COLUMNS = (
    "t",
    "px", "py", "pz",
    "vx", "vy", "vz",
    "qx", "qy", "qz", "qw",
    "fth", "wx", "wy", "wz",
)


def _default_params_min() -> DroneParams:
    return DroneParams(thrust_gain=6.03 * 0.8, mass=0.8)


def _default_params_max() -> DroneParams:
    return DroneParams(thrust_gain=6.03 * 1.2, mass=1.2)


@dataclass(frozen=True)
class RandomizationSpec:
    """Bounds for parameter draws and initial-state perturbations."""

    params_min: DroneParams = field(default_factory=_default_params_min)
    params_max: DroneParams = field(default_factory=_default_params_max)
    position_delta: DoubleMatrix = field(default_factory=lambda: np.full(3, 0.25))
    velocity_delta: DoubleMatrix = field(default_factory=lambda: np.full(3, 0.25))
    orientation_delta: DoubleMatrix = field(default_factory=lambda: np.full(3, 0.1))
    samples_per_step: int = 5
    duration: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("position_delta", "velocity_delta", "orientation_delta"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (3,):
                raise ValueError(f"{name} must have shape (3,)")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
                raise ValueError(f"{name} must be finite and non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.params_min.thrust_gain > self.params_max.thrust_gain:
            raise ValueError("thrust_gain bounds are inverted")
        if self.params_min.mass > self.params_max.mass:
            raise ValueError("mass bounds are inverted")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be at least 1")
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class ObjectiveVector:
    """Endpoint summary of the segment a rollout was asked to fly."""

    position_change: DoubleMatrix
    initial_velocity: DoubleMatrix
    final_velocity: DoubleMatrix
    initial_orientation: Quat
    final_orientation: Quat
    total_time: float

    def __post_init__(self) -> None:
        if not self.total_time > 0.0:
            raise ValueError("total_time must be positive")
        for q in (self.initial_orientation, self.final_orientation):
            if abs(q.norm() - 1.0) > 1e-6:
                raise ValueError("objective quaternions must be unit length")

    def to_dict(self) -> dict:
        return {
            "position_change": list(self.position_change),
            "initial_velocity": list(self.initial_velocity),
            "final_velocity": list(self.final_velocity),
            "initial_orientation_xyzw": list(self.initial_orientation.as_array()),
            "final_orientation_xyzw": list(self.final_orientation.as_array()),
            "total_time": self.total_time,
        }


@dataclass(frozen=True)
class HistoryFeatures:
    """Relative-motion features between consecutive states.

    ``orientation_deltas[k]`` holds the rotation taking vectors expressed in
    the body frame at step k+1 to the body frame at step k, stored xyzw.
    """

    time_deltas: DoubleMatrix  # (K,)
    position_deltas: DoubleMatrix  # (K, 3)
    velocity_deltas: DoubleMatrix  # (K, 3)
    orientation_deltas: DoubleMatrix  # (K, 4)


@dataclass(frozen=True)
class RolloutRecord:
    params: DroneParams
    states: DoubleMatrix  # (K+1, 10)
    inputs: DoubleMatrix  # (K, 4)
    timestamps: DoubleMatrix  # (K+1,)
    image_files: list[str]
    objective: ObjectiveVector
    origin_step: int
    sample_index: int

    def __post_init__(self) -> None:
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("a rollout has exactly one more state than input")
        if self.timestamps.shape != (self.states.shape[0],):
            raise ValueError("one timestamp per state")
        if self.image_files and len(self.image_files) != self.states.shape[0]:
            raise ValueError("one image per state when images are present")


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    data: dict

    @property
    def rollouts(self) -> list[dict]:
        return self.data["rollouts"]

    @property
    def rejected(self) -> list[dict]:
        return self.data["rejected"]

    @property
    def pair_count(self) -> int:
        return self.data["counts"]["pairs"]


def rollout_rng(seed: int, origin_step: int, sample_index: int) -> np.random.Generator:
    """Independent, order-insensitive RNG stream for one (i, j) rollout."""
    return np.random.default_rng(np.random.SeedSequence((seed, origin_step, sample_index)))


def sample_rollout_seed(
    spec: RandomizationSpec, reference_state: DroneState, rng: np.random.Generator
) -> tuple[DroneParams, DroneState]:
    """Draw model parameters and a perturbed initial state for one rollout.

    The draw order is part of the dataset format: thrust gain, mass, position
    offsets, velocity offsets, then small-angle orientation offsets about the
    body x/y/z axes (composed in that order on the reference orientation).
    """
    thrust_gain = float(rng.uniform(spec.params_min.thrust_gain, spec.params_max.thrust_gain))
    mass = float(rng.uniform(spec.params_min.mass, spec.params_max.mass))
    pos_offset = rng.uniform(-spec.position_delta, spec.position_delta)
    vel_offset = rng.uniform(-spec.velocity_delta, spec.velocity_delta)
    angles = rng.uniform(-spec.orientation_delta, spec.orientation_delta)

    q = reference_state.orientation
    for axis_index in range(3):
        axis = np.zeros(3)
        axis[axis_index] = 1.0
        q = quat_multiply(q, Quat.from_axis_angle(axis, float(angles[axis_index])))
    state = DroneState(
        position=reference_state.position + pos_offset,
        velocity=reference_state.velocity + vel_offset,
        orientation=q.normalized(),
    )
    return DroneParams(thrust_gain=thrust_gain, mass=mass), state


def history_features(states: DoubleMatrix, timestamps: DoubleMatrix) -> HistoryFeatures:
    """Relative-motion features for a state sequence.

    Position deltas are inferred from the newer sample's velocity over the
    interval rather than differencing positions, and the orientation delta is
    the newer attitude's conjugate composed with the older attitude.
    """
    states = np.asarray(states, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != 10:
        raise ValueError("states must be (K+1, 10)")
    if timestamps.shape != (states.shape[0],):
        raise ValueError("one timestamp per state")
    if states.shape[0] < 2:
        raise ValueError("need at least two states")
    dt = np.diff(timestamps)
    if np.any(dt <= 0.0):
        raise ValueError("timestamps must be strictly increasing")

    new = states[1:]
    old = states[:-1]
    dp = dt[:, None] * new[:, 3:6]
    dv = new[:, 3:6] - old[:, 3:6]
    dq = np.empty((new.shape[0], 4))
    for k in range(new.shape[0]):
        q_new = Quat.from_array(new[k, 6:10])
        q_old = Quat.from_array(old[k, 6:10])
        dq[k] = quat_multiply(q_new.conjugate(), q_old).normalized().as_array()
    return HistoryFeatures(
        time_deltas=dt, position_deltas=dp, velocity_deltas=dv, orientation_deltas=dq
    )


def objective_vector(states: DoubleMatrix, timestamps: DoubleMatrix) -> ObjectiveVector:
    """Endpoint summary (displacement, boundary velocities/attitudes, duration)."""
    states = np.asarray(states, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != 10 or states.shape[0] < 2:
        raise ValueError("states must be (K+1, 10) with at least two rows")
    if timestamps.shape != (states.shape[0],):
        raise ValueError("one timestamp per state")
    return ObjectiveVector(
        position_change=states[-1, 0:3] - states[0, 0:3],
        initial_velocity=states[0, 3:6].copy(),
        final_velocity=states[-1, 3:6].copy(),
        initial_orientation=Quat.from_array(states[0, 6:10]),
        final_orientation=Quat.from_array(states[-1, 6:10]),
        total_time=float(timestamps[-1] - timestamps[0]),
    )


def render_rollout_images(
    states: DoubleMatrix,
    cam_from_body: RigidTransform,
    scene: SplatScene,
    intrinsics: CameraIntrinsics,
) -> list[Image]:
    """One rendered frame per state, from the body-mounted camera."""
    images = []
    for row in np.asarray(states, dtype=np.float64):
        state = DroneState.from_array(row)
        body = RigidTransform(rotation=state.orientation, translation=state.position)
        images.append(render(scene, body, cam_from_body, intrinsics, workers=1))
    return images


def write_states_csv(path: Path, timestamps, states, inputs) -> None:
    """17-significant-digit CSV; the final row has NaN input columns."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    n = states.shape[0]
    table = np.full((n, 15), np.nan)
    table[:, 0] = timestamps
    table[:, 1:11] = states
    table[:-1, 11:15] = inputs
    np.savetxt(
        path, table, fmt="%.17g", delimiter=",",
        header=",".join(STATES_CSV_COLUMNS), comments="",
    )


def read_states_csv(path: Path) -> tuple[DoubleMatrix, DoubleMatrix, DoubleMatrix]:
    """Inverse of write_states_csv: (timestamps, states, inputs)."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
    columns = tuple(header.split(","))
    if columns != STATES_CSV_COLUMNS:
        missing = [c for c in STATES_CSV_COLUMNS if c not in columns]
        raise ValueError(
            f"unexpected states.csv columns {columns}"
            + (f"; missing {missing}" if missing else "")
        )
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 15:
        raise ValueError(f"states.csv must have 15 columns, found {table.shape[1]}")
    return table[:, 0], table[:, 1:11], table[:-1, 11:15]


def _scene_digest(scene: SplatScene, scene_path: Path | None) -> dict:
    if scene_path is not None:
        digest = hashlib.sha256(Path(scene_path).read_bytes()).hexdigest()
        return {"path": str(scene_path), "sha256": digest}
    h = hashlib.sha256()
    for arr in (scene.means, scene.scales, scene.rotations, scene.opacities, scene.colors):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return {"path": None, "sha256": h.hexdigest()}


def _trajectory_digest(traj: DesiredTrajectory) -> dict:
    h = hashlib.sha256()
    h.update(traj.states.tobytes())
    h.update(traj.inputs.tobytes())
    return {"dt": traj.dt, "n_steps": traj.n_steps, "sha256": h.hexdigest()}


def _spec_to_dict(spec: RandomizationSpec) -> dict:
    return {
        "thrust_gain_range": [spec.params_min.thrust_gain, spec.params_max.thrust_gain],
        "mass_range": [spec.params_min.mass, spec.params_max.mass],
        "position_delta": list(spec.position_delta),
        "velocity_delta": list(spec.velocity_delta),
        "orientation_delta": list(spec.orientation_delta),
        "samples_per_step": spec.samples_per_step,
        "duration": spec.duration,
        "seed": spec.seed,
    }


def _mpc_to_dict(config: MpcConfig) -> dict:
    return {
        "horizon": config.horizon,
        "state_weights": config.state_weights.tolist(),
        "input_weights": config.input_weights.tolist(),
        "terminal_weights": config.terminal_weights.tolist(),
        "u_min": config.u_min.tolist(),
        "u_max": config.u_max.tolist(),
        "control_rate": config.control_rate,
        "sqp_iters": config.sqp_iters,
        "tol": config.tol,
    }


def _camera_to_dict(intrinsics: CameraIntrinsics, cam_from_body: RigidTransform) -> dict:
    return {
        "intrinsics": {
            "width": intrinsics.width,
            "height": intrinsics.height,
            "fx": intrinsics.fx,
            "fy": intrinsics.fy,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
        },
        "mount": {
            "translation": list(cam_from_body.translation),
            "rotation_xyzw": list(cam_from_body.rotation.as_array()),
        },
    }


def _run_one_rollout(
    origin_step: int,
    sample_index: int,
    traj: DesiredTrajectory,
    spec: RandomizationSpec,
    config: MpcConfig,
    scene: SplatScene | None,
    cam_from_body: RigidTransform | None,
    intrinsics: CameraIntrinsics | None,
    out_dir: Path,
) -> dict:
    rng = rollout_rng(spec.seed, origin_step, sample_index)
    params, x0 = sample_rollout_seed(spec, traj.state_at(origin_step), rng)
    try:
        result = closed_loop_run(x0, params, traj, spec.duration, config, start_index=origin_step)
    except ExpertDivergence as exc:
        return {
            "origin_step": origin_step,
            "sample_index": sample_index,
            "accepted": False,
            "reason": str(exc),
        }

    name = f"rollout_{origin_step}_{sample_index}"
    timestamps = origin_step * traj.dt + np.arange(result.states.shape[0]) * config.dt

    rollout_dir = out_dir / "rollouts" / name
    rollout_dir.mkdir(parents=True, exist_ok=True)
    states_rel = f"rollouts/{name}/states.csv"
    write_states_csv(out_dir / states_rel, timestamps, result.states, result.inputs)

    image_files: list[str] = []
    if scene is not None:
        frames = render_rollout_images(result.states, cam_from_body, scene, intrinsics)
        frame_dir = out_dir / "images" / name
        frame_dir.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(frames):
            rel = f"images/{name}/frame_{k}.png"
            frame.save(out_dir / rel)
            image_files.append(rel)

    # The task summary comes from the reference segment the expert was asked
    # to fly, not from the flown path.
    k_end = min(origin_step + result.inputs.shape[0], traj.states.shape[0] - 1)
    desired_slice = traj.states[origin_step : k_end + 1]
    desired_times = np.arange(origin_step, k_end + 1) * traj.dt
    objective = objective_vector(desired_slice, desired_times)

    return {
        "origin_step": origin_step,
        "sample_index": sample_index,
        "accepted": True,
        "params": {"thrust_gain": params.thrust_gain, "mass": params.mass},
        "states_file": states_rel,
        "images": image_files,
        "objective": objective.to_dict(),
    }


def generate_dataset(
    traj: DesiredTrajectory,
    spec: RandomizationSpec,
    config: MpcConfig,
    out_dir: str | Path,
    scene: SplatScene | None = None,
    cam_from_body: RigidTransform | None = None,
    intrinsics: CameraIntrinsics | None = None,
    scene_path: str | Path | None = None,
    workers: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> DatasetManifest:
    """Run the full randomization sweep and persist it under ``out_dir``.

    One rollout is seeded at every trajectory step for every sample index:
    steps x samples_per_step attempts in total. Pass ``scene=None`` for a
    state-action-only dataset (no frames rendered). The manifest, state
    files, and frames are byte-identical for a fixed spec seed regardless of
    ``workers``.
    """
    if scene is not None:
        if cam_from_body is None or intrinsics is None:
            raise ValueError("rendering needs cam_from_body and intrinsics")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_steps_traj = traj.n_steps
    jobs = [(i, j) for i in range(n_steps_traj) for j in range(spec.samples_per_step)]

    def run(job: tuple[int, int]) -> dict:
        i, j = job
        entry = _run_one_rollout(i, j, traj, spec, config, scene, cam_from_body, intrinsics, out_dir)
        if progress is not None:
            status = "ok" if entry["accepted"] else "rejected"
            progress(f"rollout {i},{j}: {status}")
        return entry

    if workers is None or workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run, jobs))
    else:
        entries = [run(job) for job in jobs]

    entries.sort(key=lambda e: (e["origin_step"], e["sample_index"]))
    accepted = [e for e in entries if e["accepted"]]
    rejected = [
        {"origin_step": e["origin_step"], "sample_index": e["sample_index"], "reason": e["reason"]}
        for e in entries
        if not e["accepted"]
    ]
    for e in accepted:
        e.pop("accepted")

    rollout_steps = int(round(config.control_rate * spec.duration))
    data = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": spec.seed,
        "counts": {
            "trajectory_steps": n_steps_traj,
            "samples_per_step": spec.samples_per_step,
            "attempted": len(jobs),
            "rollouts": len(accepted),
            "rejected": len(rejected),
            "pairs": len(accepted) * rollout_steps,
        },
        "rollout_steps": rollout_steps,
        "randomization": _spec_to_dict(spec),
        "mpc": _mpc_to_dict(config),
        "camera": None if scene is None else _camera_to_dict(intrinsics, cam_from_body),
        "scene": None if scene is None else _scene_digest(scene, scene_path),
        "trajectory": _trajectory_digest(traj),
        "rollouts": accepted,
        "rejected": rejected,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="ascii")
    return DatasetManifest(root=out_dir, data=data)


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    data = json.loads((root / "manifest.json").read_text(encoding="ascii"))
    if data.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format {data.get('format_version')}")
    return DatasetManifest(root=root, data=data)
