"""Gaussian scene representation and synthetic test-scene generation.

A scene stores its gaussians in structure-of-arrays form (fast to project in
bulk) plus a similarity "alignment" transform mapping simulation-world
coordinates into the frame the gaussians live in. Scenes loaded from files
default to the identity alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import numpy.typing as npt

from ..geom import Quat, RigidTransform, Vector3, _as_vec3, quat_multiply, rotate_vector

DoubleMatrix = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Gaussian3D:
    """One 3D gaussian: mean, per-axis std-dev scale, rotation, opacity, color."""

    mean: Vector3
    scale: Vector3
    rotation: Quat
    opacity: float
    color: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _as_vec3(self.mean))
        object.__setattr__(self, "scale", _as_vec3(self.scale))
        object.__setattr__(self, "color", _as_vec3(self.color))
        if not np.all(self.scale > 0.0):
            raise ValueError("scale components must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError("color channels must lie in [0, 1]")
        if abs(self.rotation.norm() - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")

    def covariance(self) -> DoubleMatrix:
        """3x3 covariance R diag(scale²) Rᵀ (symmetric positive definite)."""
        r = self.rotation.to_matrix()
        return r @ np.diag(self.scale**2) @ r.T


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform-scale rigid transform: ``x_out = scale · R x + t``."""

    scale: float = 1.0
    rotation: Quat = field(default_factory=Quat.identity)
    translation: Vector3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError("similarity scale must be positive")
        if abs(self.rotation.norm() - 1.0) > 1e-6:
            raise ValueError("similarity rotation must be a unit quaternion")

    @staticmethod
    def identity() -> SimilarityTransform:
        return SimilarityTransform()

    def apply(self, points: DoubleMatrix) -> DoubleMatrix:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = self.scale * (pts @ self.rotation.to_matrix().T) + self.translation
        return out[0] if np.asarray(points).ndim == 1 else out

    def apply_pose(self, pose: RigidTransform) -> RigidTransform:
        """Map a pose (local frame -> world) into the target frame.

        The returned pose has orthonormal axes (directions are unaffected by
        the uniform scale); lengths along those axes are scaled by ``scale``,
        which callers must account for separately (e.g. the near plane).
        """
        return RigidTransform(
            quat_multiply(self.rotation, pose.rotation).normalized(),
            self.apply(pose.translation),
        )


class SplatScene:
    """Immutable collection of gaussians plus alignment and background color."""

    def __init__(
        self,
        means: DoubleMatrix,
        scales: DoubleMatrix,
        rotations: DoubleMatrix,
        opacities: DoubleMatrix,
        colors: DoubleMatrix,
        alignment: SimilarityTransform | None = None,
        background: Sequence[float] | Vector3 = (0.0, 0.0, 0.0),
    ) -> None:
        means = np.ascontiguousarray(means, dtype=np.float64)
        scales = np.ascontiguousarray(scales, dtype=np.float64)
        rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        colors = np.ascontiguousarray(colors, dtype=np.float64)
        n = means.shape[0]
        if means.shape != (n, 3) or scales.shape != (n, 3) or rotations.shape != (n, 4):
            raise ValueError("means (N,3), scales (N,3), rotations (N,4) shape mismatch")
        if opacities.shape != (n,) or colors.shape != (n, 3):
            raise ValueError("opacities (N,) / colors (N,3) shape mismatch")
        if n > 0:
            if not np.all(np.isfinite(means)):
                raise ValueError("gaussian means must be finite")
            if not np.all(scales > 0.0):
                raise ValueError("gaussian scales must be positive")
            if np.any(opacities < 0.0) or np.any(opacities > 1.0):
                raise ValueError("opacities must lie in [0, 1]")
            if np.any(colors < 0.0) or np.any(colors > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            norms = np.linalg.norm(rotations, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("rotation quaternions must be unit length")
        for arr in (means, scales, rotations, opacities, colors):
            arr.setflags(write=False)
        self.means = means
        self.scales = scales
        self.rotations = rotations
        self.opacities = opacities
        self.colors = colors
        self.alignment = alignment if alignment is not None else SimilarityTransform.identity()
        bg = _as_vec3(background)
        if np.any(bg < 0.0) or np.any(bg > 1.0):
            raise ValueError("background channels must lie in [0, 1]")
        bg.setflags(write=False)
        self.background = bg

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(),
            self.scales[i].copy(),
            Quat.from_array(self.rotations[i]),
            float(self.opacities[i]),
            self.colors[i].copy(),
        )

    @property
    def gaussians(self) -> tuple[Gaussian3D, ...]:
        return tuple(self.gaussian(i) for i in range(len(self)))

    @staticmethod
    def from_gaussians(
        gaussians: Sequence[Gaussian3D],
        alignment: SimilarityTransform | None = None,
        background: Sequence[float] | Vector3 = (0.0, 0.0, 0.0),
    ) -> SplatScene:
        n = len(gaussians)
        means = np.zeros((n, 3))
        scales = np.ones((n, 3))
        rotations = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (n, 1))
        opacities = np.zeros(n)
        colors = np.zeros((n, 3))
        for i, g in enumerate(gaussians):
            means[i] = g.mean
            scales[i] = g.scale
            rotations[i] = g.rotation.as_array()
            opacities[i] = g.opacity
            colors[i] = g.color
        return SplatScene(means, scales, rotations, opacities, colors, alignment, background)

    def with_background(self, background: Sequence[float] | Vector3) -> SplatScene:
        return SplatScene(
            self.means, self.scales, self.rotations, self.opacities, self.colors, self.alignment, background
        )

    def with_alignment(self, alignment: SimilarityTransform) -> SplatScene:
        return SplatScene(
            self.means, self.scales, self.rotations, self.opacities, self.colors, alignment, self.background
        )


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; gaussians are placed on its six faces."""

    center: Vector3
    size: Vector3  # full extents per axis
    color: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _as_vec3(self.center))
        object.__setattr__(self, "size", _as_vec3(self.size))
        object.__setattr__(self, "color", _as_vec3(self.color))
        if not np.all(self.size > 0.0):
            raise ValueError("box size must be positive")

    def surface_area(self) -> float:
        a, b, c = self.size
        return float(2.0 * (a * b + b * c + c * a))

    def sample_surface(self, n: int, rng: np.random.Generator):
        a, b, c = self.size
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face_normals = np.array(
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
        )
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        points = np.empty((n, 3))
        half = self.size / 2.0
        for axis in range(3):
            others = [i for i in range(3) if i != axis]
            for sign, face in ((1.0, 2 * axis), (-1.0, 2 * axis + 1)):
                m = faces == face
                points[m, axis] = sign * half[axis]
                points[m, others[0]] = uv[m, 0] * self.size[others[0]]
                points[m, others[1]] = uv[m, 1] * self.size[others[1]]
        return points + self.center, face_normals[faces]


@dataclass(frozen=True)
class Sphere:
    center: Vector3
    radius: float
    color: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _as_vec3(self.center))
        object.__setattr__(self, "color", _as_vec3(self.color))
        if not self.radius > 0.0:
            raise ValueError("sphere radius must be positive")

    def surface_area(self) -> float:
        return float(4.0 * np.pi * self.radius**2)

    def sample_surface(self, n: int, rng: np.random.Generator):
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return self.center + self.radius * normals, normals


@dataclass(frozen=True)
class Plane:
    """Finite rectangular patch: center, unit normal, half-extents along its tangents."""

    center: Vector3
    normal: Vector3
    extent: npt.NDArray[np.float64]  # (2,) half-sizes
    color: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _as_vec3(self.center))
        n = _as_vec3(self.normal)
        nn = np.linalg.norm(n)
        if nn == 0.0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / nn)
        ext = np.asarray(self.extent, dtype=np.float64)
        if ext.shape != (2,) or not np.all(ext > 0.0):
            raise ValueError("plane extent must be two positive half-sizes")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "color", _as_vec3(self.color))

    def tangent_basis(self) -> tuple[Vector3, Vector3]:
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v

    def surface_area(self) -> float:
        return float(4.0 * self.extent[0] * self.extent[1])

    def sample_surface(self, n: int, rng: np.random.Generator):
        u, v = self.tangent_basis()
        ab = rng.uniform(-1.0, 1.0, size=(n, 2)) * self.extent
        points = self.center + ab[:, :1] * u + ab[:, 1:] * v
        normals = np.tile(self.normal, (n, 1))
        return points, normals


Primitive = Box | Sphere | Plane


def _align_z_to(normals: DoubleMatrix) -> DoubleMatrix:
    """Quaternions (N,4) rotating the local z axis onto each unit normal."""
    n = normals.shape[0]
    out = np.empty((n, 4))
    bz = normals[:, 2]
    regular = bz > -1.0 + 1e-9
    s = np.sqrt(2.0 * (1.0 + np.clip(bz[regular], -1.0, 1.0)))
    out[regular, 0] = -normals[regular, 1] / s
    out[regular, 1] = normals[regular, 0] / s
    out[regular, 2] = 0.0
    out[regular, 3] = s / 2.0
    out[~regular] = np.array([1.0, 0.0, 0.0, 0.0])  # 180° about x for the antipode
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def generate_synthetic_scene(
    primitives: Sequence[Primitive],
    density: float,
    seed: int,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    alignment: SimilarityTransform | None = None,
) -> SplatScene:
    """Cover each primitive's surface with gaussians at ``density`` per m².

    Deterministic under a fixed (primitives, density, seed) triple. The
    per-primitive gaussian count is exactly ``round(density · area)`` (min 1),
    gaussian footprints shrink as density grows so surfaces stay closed, and
    each gaussian is flattened along the local surface normal.
    """
    if not density > 0.0:
        raise ValueError("density must be positive")
    if len(primitives) == 0:
        return SplatScene(
            np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
            alignment, background,
        )
    rng = np.random.default_rng(seed)
    all_means, all_scales, all_rots, all_ops, all_cols = [], [], [], [], []
    sigma_t = 0.7 / np.sqrt(density)
    for prim in primitives:
        count = max(1, int(round(density * prim.surface_area())))
        points, normals = prim.sample_surface(count, rng)
        tilt = _align_z_to(normals)
        spin = rng.uniform(0.0, 2.0 * np.pi, size=count)
        half = spin / 2.0
        spin_q = np.column_stack([np.zeros(count), np.zeros(count), np.sin(half), np.cos(half)])
        # Hamilton product tilt ⊗ spin, vectorized.
        ax, ay, az, aw = tilt.T
        bx, by, bz, bw = spin_q.T
        rot = np.column_stack(
            [
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by + ay * bw + az * bx - ax * bz,
                aw * bz + az * bw + ax * by - ay * bx,
                aw * bw - ax * bx - ay * by - az * bz,
            ]
        )
        rot /= np.linalg.norm(rot, axis=1, keepdims=True)
        jitter = rng.uniform(0.75, 1.25, size=(count, 2))
        scales = np.column_stack([sigma_t * jitter[:, 0], sigma_t * jitter[:, 1], np.full(count, 0.1 * sigma_t)])
        tint = rng.uniform(-0.12, 0.12, size=(count, 3))
        colors = np.clip(prim.color * (1.0 + tint), 0.0, 1.0)
        opacities = rng.uniform(0.7, 0.95, size=count)
        all_means.append(points)
        all_scales.append(scales)
        all_rots.append(rot)
        all_ops.append(opacities)
        all_cols.append(colors)
    return SplatScene(
        np.vstack(all_means),
        np.vstack(all_scales),
        np.vstack(all_rots),
        np.concatenate(all_ops),
        np.vstack(all_cols),
        alignment,
        background,
    )


def primitives_from_json(spec: Sequence[dict]) -> list[Primitive]:
    """Parse a JSON-style primitive list (``[{"type": "box", ...}, ...]``)."""
    out: list[Primitive] = []
    for i, entry in enumerate(spec):
        kind = entry.get("type")
        try:
            if kind == "box":
                out.append(Box(np.array(entry["center"], float), np.array(entry["size"], float), np.array(entry["color"], float)))
            elif kind == "sphere":
                out.append(Sphere(np.array(entry["center"], float), float(entry["radius"]), np.array(entry["color"], float)))
            elif kind == "plane":
                out.append(
                    Plane(
                        np.array(entry["center"], float),
                        np.array(entry["normal"], float),
                        np.array(entry["extent"], float),
                        np.array(entry["color"], float),
                    )
                )
            else:
                raise ValueError(f"primitive {i}: unknown type {kind!r}")
        except KeyError as exc:
            raise ValueError(f"primitive {i} ({kind}): missing field {exc}") from exc
    return out
