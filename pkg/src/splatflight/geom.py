"""Quaternion algebra, rigid transforms, and the pinhole camera model.

All frame conventions for the package live in this module, on purpose:

* Quaternions use the Hamilton convention and are stored in component order
  ``(x, y, z, w)``. An orientation quaternion maps body-frame vectors into
  the world frame via :func:`rotate_vector` (i.e. ``v_world = q * v_body * conj(q)``).
* The world frame has its z axis pointing *down*; gravity acts along +z.
* The camera frame looks along +z, x right, y down (standard pinhole).
* A pose is represented as the :class:`RigidTransform` mapping local
  coordinates of the posed frame into world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

Vector3 = npt.NDArray[np.float64]

_UNIT_TOL = 1e-6


def _as_vec3(v: Sequence[float] | Vector3) -> Vector3:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Quat:
    """Unit quaternion, Hamilton convention, stored as (x, y, z, w)."""

    x: float
    y: float
    z: float
    w: float

    @staticmethod
    def identity() -> Quat:
        return Quat(0.0, 0.0, 0.0, 1.0)

    @staticmethod
    def from_array(a: Sequence[float] | npt.NDArray[np.float64]) -> Quat:
        arr = np.asarray(a, dtype=np.float64)
        if arr.shape != (4,):
            raise ValueError(f"expected a 4-vector (x, y, z, w), got shape {arr.shape}")
        return Quat(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))

    @staticmethod
    def from_axis_angle(axis: Sequence[float] | Vector3, angle: float) -> Quat:
        """Quaternion rotating by ``angle`` radians about ``axis``."""
        ax = _as_vec3(axis)
        norm = float(np.linalg.norm(ax))
        if norm == 0.0:
            raise ValueError("rotation axis must be non-zero")
        ax = ax / norm
        half = 0.5 * angle
        s = np.sin(half)
        return Quat(float(ax[0] * s), float(ax[1] * s), float(ax[2] * s), float(np.cos(half)))

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.array([self.x, self.y, self.z, self.w], dtype=np.float64)

    def norm(self) -> float:
        return float(np.sqrt(self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w))

    def normalized(self) -> Quat:
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        return Quat(self.x / n, self.y / n, self.z / n, self.w / n)

    def conjugate(self) -> Quat:
        return Quat(-self.x, -self.y, -self.z, self.w)

    def canonical(self) -> Quat:
        """The representative of {q, -q} with non-negative scalar part."""
        if self.w < 0.0 or (self.w == 0.0 and (self.x < 0.0 or (self.x == 0.0 and (self.y < 0.0 or (self.y == 0.0 and self.z < 0.0))))):
            return Quat(-self.x, -self.y, -self.z, -self.w)
        return self

    def to_matrix(self) -> npt.NDArray[np.float64]:
        """3x3 rotation matrix with the same vector action as rotate_vector."""
        x, y, z, w = self.x, self.y, self.z, self.w
        return np.array(
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
                [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
                [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )


def quat_multiply(a: Quat, b: Quat) -> Quat:
    """Hamilton product ``a ⊗ b`` (apply ``b`` first, then ``a``)."""
    return Quat(
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y + a.y * b.w + a.z * b.x - a.x * b.z,
        a.w * b.z + a.z * b.w + a.x * b.y - a.y * b.x,
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
    )


def rotate_vector(q: Quat, v: Sequence[float] | Vector3) -> Vector3:
    """Rotate ``v`` by ``q`` (the action of ``q v conj(q)`` on a pure quaternion)."""
    if abs(q.norm() - 1.0) > _UNIT_TOL:
        raise ValueError(f"quaternion must be unit length (|q| = {q.norm():.9f})")
    vec = _as_vec3(v)
    # Expansion of q (0, v) q* using two cross products; cheaper and exact.
    u = np.array([q.x, q.y, q.z], dtype=np.float64)
    t = 2.0 * np.cross(u, vec)
    return vec + q.w * t + np.cross(u, t)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform (rotation then translation): ``p_out = R p_in + t``.

    Used both for frame-to-frame transforms and for poses (a pose is the
    transform mapping the posed frame's local coordinates to world).
    """

    rotation: Quat
    translation: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        if abs(self.rotation.norm() - 1.0) > _UNIT_TOL:
            raise ValueError("RigidTransform rotation must be a unit quaternion")

    @staticmethod
    def identity() -> RigidTransform:
        return RigidTransform(Quat.identity(), np.zeros(3))

    def apply(self, point: Sequence[float] | Vector3) -> Vector3:
        return rotate_vector(self.rotation, point) + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            quat_multiply(self.rotation, other.rotation).normalized(),
            self.apply(other.translation),
        )

    def inverse(self) -> RigidTransform:
        inv_rot = self.rotation.conjugate()
        return RigidTransform(inv_rot, -rotate_vector(inv_rot, self.translation))

    def to_matrix(self) -> npt.NDArray[np.float64]:
        """Homogeneous 4x4 matrix form."""
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 180.0
    width: int = 640
    height: int = 360

    def __post_init__(self) -> None:
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (isinstance(self.width, int) and isinstance(self.height, int) and self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive integers")
        if not (0.0 < self.cx < self.width):
            raise ValueError(f"cx must lie inside (0, width), got {self.cx}")
        if not (0.0 < self.cy < self.height):
            raise ValueError(f"cy must lie inside (0, height), got {self.cy}")


def body_camera_pose(body: RigidTransform, cam_from_body: RigidTransform) -> RigidTransform:
    """World pose of the camera given the body pose and the camera's mount transform.

    ``cam_from_body`` maps camera-frame coordinates into the body frame, so the
    returned transform maps camera coordinates all the way into world.
    """
    return body.compose(cam_from_body)


def project_point(
    p_cam: Sequence[float] | Vector3, intrinsics: CameraIntrinsics, near: float = 0.01
) -> Optional[Tuple[float, float, float]]:
    """Project a camera-frame point to pixel coordinates.

    Returns ``(u, v, depth)``, or ``None`` when the point is at or behind the
    near plane (not visible). ``u = fx·x/z + cx``, ``v = fy·y/z + cy``.
    """
    p = _as_vec3(p_cam)
    z = float(p[2])
    if z <= near:
        return None
    u = intrinsics.fx * float(p[0]) / z + intrinsics.cx
    v = intrinsics.fy * float(p[1]) / z + intrinsics.cy
    return (u, v, z)
