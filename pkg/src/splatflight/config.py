"""Run configuration loaded from a single TOML or JSON file.

One file describes a whole batch run: scene, camera, controller, and
randomization settings. Command-line flags are applied on top as dotted-key
overrides ("output.dir", "randomization.seed", ...) and always win. The
schema is versioned through a top-level ``format_version`` key; unknown keys
are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

try:  # python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]

from .datagen import RandomizationSpec
from .dynamics import DroneParams
from .expert import MpcConfig
from .geom import CameraIntrinsics, Quat, RigidTransform
from .splat.scene import SimilarityTransform

FORMAT_VERSION = 1

__all__ = ["Config", "ConfigError", "FORMAT_VERSION", "load_config"]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration (CLI exit code 2)."""


def _default_mount() -> RigidTransform:
    # Camera 5 cm forward of the body origin, axes aligned with the body.
    return RigidTransform(Quat.identity(), np.array([0.05, 0.0, 0.0]))


@dataclass(frozen=True)
class Config:
    """Validated settings shared by every command."""

    scene_path: Path | None = None
    # PLY files carry no background color, so it lives in the config.
    scene_background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alignment: SimilarityTransform = field(default_factory=SimilarityTransform.identity)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    cam_from_body: RigidTransform = field(default_factory=_default_mount)
    control_rate: float = 20.0
    mpc: MpcConfig = field(default_factory=MpcConfig)
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    output_dir: Path = Path("out")

    def __post_init__(self) -> None:
        if not (self.control_rate > 0.0 and np.isfinite(self.control_rate)):
            raise ConfigError("control rate must be positive and finite")

    def validate(self) -> Config:
        """Check that referenced files exist. Returns self for chaining."""
        if self.scene_path is not None and not self.scene_path.is_file():
            raise ConfigError(f"scene file not found: {self.scene_path}")
        return self

    def to_dict(self) -> dict:
        """JSON-serializable echo of the full configuration."""
        return {
            "format_version": FORMAT_VERSION,
            "scene": {
                "path": None if self.scene_path is None else str(self.scene_path),
                "background": list(self.scene_background),
                "alignment": {
                    "scale": self.alignment.scale,
                    "rotation": list(self.alignment.rotation.as_array()),
                    "translation": list(self.alignment.translation),
                },
            },
            "camera": {
                "width": self.intrinsics.width,
                "height": self.intrinsics.height,
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
                "mount_translation": list(self.cam_from_body.translation),
                "mount_rotation": list(self.cam_from_body.rotation.as_array()),
            },
            "control": {"rate": self.control_rate},
            "mpc": {
                "horizon": self.mpc.horizon,
                "state_weights": list(np.diag(self.mpc.state_weights)),
                "input_weights": list(np.diag(self.mpc.input_weights)),
                "terminal_weights": list(np.diag(self.mpc.terminal_weights)),
                "u_min": list(self.mpc.u_min),
                "u_max": list(self.mpc.u_max),
                "sqp_iters": self.mpc.sqp_iters,
                "tol": self.mpc.tol,
            },
            "randomization": {
                "seed": self.randomization.seed,
                "samples_per_step": self.randomization.samples_per_step,
                "duration": self.randomization.duration,
                "thrust_gain": [
                    self.randomization.params_min.thrust_gain,
                    self.randomization.params_max.thrust_gain,
                ],
                "mass": [
                    self.randomization.params_min.mass,
                    self.randomization.params_max.mass,
                ],
                "position_delta": list(self.randomization.position_delta),
                "velocity_delta": list(self.randomization.velocity_delta),
                "orientation_delta": list(self.randomization.orientation_delta),
            },
            "output": {"dir": str(self.output_dir)},
        }


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def _reject_unknown(table: dict, section: str) -> None:
    if table:
        keys = ", ".join(sorted(table))
        raise ConfigError(f"unknown key(s) in [{section}]: {keys}")


def _number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return value


def _vector(value: Any, n: int, name: str) -> np.ndarray:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(n, float(value))
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(f"{name} must be a list of {n} numbers")
    return np.array([_number(v, f"{name}[{i}]") for i, v in enumerate(value)])


def _pair(value: Any, name: str) -> tuple[float, float]:
    vec = _vector(value, 2, name)
    return float(vec[0]), float(vec[1])


def _quat(value: Any, name: str) -> Quat:
    x, y, z, w = _vector(value, 4, name)
    q = Quat(float(x), float(y), float(z), float(w))
    if abs(q.norm() - 1.0) > 1e-6:
        raise ConfigError(f"{name} must be a unit quaternion (x, y, z, w)")
    return q


def _parse_alignment(table: Any) -> SimilarityTransform:
    if not isinstance(table, dict):
        raise ConfigError("scene.alignment must be a table")
    table = dict(table)
    out = SimilarityTransform(
        scale=_number(table.pop("scale", 1.0), "scene.alignment.scale"),
        rotation=_quat(table.pop("rotation", [0, 0, 0, 1]), "scene.alignment.rotation"),
        translation=_vector(table.pop("translation", [0, 0, 0]), 3, "scene.alignment.translation"),
    )
    _reject_unknown(table, "scene.alignment")
    return out


def _merge_overrides(data: dict, overrides: Mapping[str, Any]) -> None:
    """Apply dotted-key overrides in place; flags win over file values."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a table")
        node[parts[-1]] = value


def _read_file(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path.name}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table/object")
    return data


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Config:
    """Build a validated Config from an optional file plus flag overrides."""
    data: dict = {} if path is None else _read_file(Path(path))
    if overrides:
        _merge_overrides(data, overrides)

    version = data.pop("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version!r} (expected {FORMAT_VERSION})")

    try:
        scene = dict(data.pop("scene", {}))
        scene_path = scene.pop("path", None)
        if scene_path is not None:
            scene_path = Path(str(scene_path))
        background = _vector(scene.pop("background", [0.0, 0.0, 0.0]), 3, "scene.background")
        if np.any(background < 0.0) or np.any(background > 1.0):
            raise ConfigError("scene.background components must lie in [0, 1]")
        alignment = _parse_alignment(scene.pop("alignment", {}))
        _reject_unknown(scene, "scene")

        cam = dict(data.pop("camera", {}))
        intrinsics = CameraIntrinsics(
            fx=_number(cam.pop("fx", 320.0), "camera.fx"),
            fy=_number(cam.pop("fy", 320.0), "camera.fy"),
            cx=_number(cam.pop("cx", 320.0), "camera.cx"),
            cy=_number(cam.pop("cy", 180.0), "camera.cy"),
            width=_integer(cam.pop("width", 640), "camera.width"),
            height=_integer(cam.pop("height", 360), "camera.height"),
        )
        cam_from_body = RigidTransform(
            _quat(cam.pop("mount_rotation", [0, 0, 0, 1]), "camera.mount_rotation"),
            _vector(cam.pop("mount_translation", [0.05, 0, 0]), 3, "camera.mount_translation"),
        )
        _reject_unknown(cam, "camera")

        control = dict(data.pop("control", {}))
        control_rate = _number(control.pop("rate", 20.0), "control.rate")
        _reject_unknown(control, "control")

        # [control] rate is the single clock for both sampling and the
        # solver, so the mpc table deliberately has no rate key of its own.
        mpc_table = dict(data.pop("mpc", {}))
        mpc_kwargs: dict[str, Any] = {"control_rate": control_rate}
        if "horizon" in mpc_table:
            mpc_kwargs["horizon"] = _integer(mpc_table.pop("horizon"), "mpc.horizon")
        for key, size in (("state_weights", 10), ("input_weights", 4), ("terminal_weights", 10)):
            if key in mpc_table:
                mpc_kwargs[key] = _vector(mpc_table.pop(key), size, f"mpc.{key}")
        for key in ("u_min", "u_max"):
            if key in mpc_table:
                mpc_kwargs[key] = _vector(mpc_table.pop(key), 4, f"mpc.{key}")
        if "sqp_iters" in mpc_table:
            mpc_kwargs["sqp_iters"] = _integer(mpc_table.pop("sqp_iters"), "mpc.sqp_iters")
        if "tol" in mpc_table:
            mpc_kwargs["tol"] = _number(mpc_table.pop("tol"), "mpc.tol")
        _reject_unknown(mpc_table, "mpc")
        mpc = MpcConfig(**mpc_kwargs)

        rand_table = dict(data.pop("randomization", {}))
        rand_kwargs: dict[str, Any] = {}
        tg_lo, tg_hi = _pair(rand_table.pop("thrust_gain", [6.03 * 0.8, 6.03 * 1.2]), "randomization.thrust_gain")
        m_lo, m_hi = _pair(rand_table.pop("mass", [0.8, 1.2]), "randomization.mass")
        rand_kwargs["params_min"] = DroneParams(tg_lo, m_lo)
        rand_kwargs["params_max"] = DroneParams(tg_hi, m_hi)
        for key in ("position_delta", "velocity_delta", "orientation_delta"):
            if key in rand_table:
                rand_kwargs[key] = _vector(rand_table.pop(key), 3, f"randomization.{key}")
        if "samples_per_step" in rand_table:
            rand_kwargs["samples_per_step"] = _integer(rand_table.pop("samples_per_step"), "randomization.samples_per_step")
        if "duration" in rand_table:
            rand_kwargs["duration"] = _number(rand_table.pop("duration"), "randomization.duration")
        if "seed" in rand_table:
            rand_kwargs["seed"] = _integer(rand_table.pop("seed"), "randomization.seed")
        _reject_unknown(rand_table, "randomization")
        randomization = RandomizationSpec(**rand_kwargs)

        output = dict(data.pop("output", {}))
        output_dir = Path(str(output.pop("dir", "out")))
        _reject_unknown(output, "output")

        _reject_unknown(data, "config")

        cfg = Config(
            scene_path=scene_path,
            scene_background=(float(background[0]), float(background[1]), float(background[2])),
            alignment=alignment,
            intrinsics=intrinsics,
            cam_from_body=cam_from_body,
            control_rate=control_rate,
            mpc=mpc,
            randomization=randomization,
            output_dir=output_dir,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        # Domain-type validation errors surface as config errors.
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
