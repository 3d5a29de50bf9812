"""Flight evaluation metrics and the closed-form thrust-gain adaptation oracle.

The adaptation estimate answers: if an unmodeled constant force acts on the
vehicle, what effective thrust gain would a least-squares fit to the velocity
dynamics report? Projecting the extra force onto the thrust axis gives the
closed form; a golden-section search over the same 1-D least-squares
objective serves as the brute-force cross-check.

Tracking metrics treat the desired trajectory as a sampled point set:
per-sample closest-point distances aggregate to the mean tracking error and
the fraction inside a proximity radius. Collisions test each flown position
against every sufficiently-opaque gaussian's 3-sigma ellipsoid (inflated by
the vehicle radius); consecutive colliding samples merge into one event, and
the rate normalizes events by path length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .dynamics import GRAVITY
from .flatness import DesiredTrajectory
from .geom import Quat, rotate_vector
from .splat.scene import SplatScene

DoubleMatrix = npt.NDArray[np.float64]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AdaptationEstimate:
    gain_estimate: float
    residual: float

    def __post_init__(self) -> None:
        if self.residual < 0.0:
            raise ValueError("residual cannot be negative")


@dataclass(frozen=True)
class MetricsReport:
    tracking_error: float  # mean closest-point distance, m
    tracking_error_max: float  # worst sample, m (diagnostic)
    proximity_fraction: float  # fraction of samples within proximity_radius
    proximity_radius: float  # m
    path_length: float  # flown polyline length, m
    collision_events: list[tuple[int, int]]  # inclusive (start, end) step runs
    collision_rate: float | None  # events per metre; None when path length is 0

    def to_dict(self) -> dict:
        return {
            "tracking_error": self.tracking_error,
            "tracking_error_max": self.tracking_error_max,
            "proximity_fraction": self.proximity_fraction,
            "proximity_radius": self.proximity_radius,
            "path_length": self.path_length,
            "collision_events": [list(e) for e in self.collision_events],
            "collision_rate": self.collision_rate,
        }


def _thrust_axis(orientation: Quat) -> DoubleMatrix:
    return rotate_vector(orientation, np.array([0.0, 0.0, 1.0]))


def c_hat(c: float, f_th: float, orientation: Quat, f_add) -> AdaptationEstimate:
    """Closed-form effective-gain estimate under an additive acceleration.

    The least-squares fit of ``gain`` to ``(gain - c) * f_th * z_body + f_add = 0``
    only sees the component of the extra force along the thrust axis, so the
    estimate shifts by exactly that projection over the commanded thrust.
    """
    if not f_th > 0.0:
        raise ValueError("thrust command must be positive")
    f_add = np.ascontiguousarray(f_add, dtype=np.float64)
    if f_add.shape != (3,):
        raise ValueError("f_add must be a 3-vector")
    z_body = _thrust_axis(orientation)
    estimate = c - float(np.dot(z_body, f_add)) / f_th
    residual = float(np.linalg.norm((estimate - c) * f_th * z_body + f_add))
    return AdaptationEstimate(gain_estimate=estimate, residual=residual)


def c_hat_bruteforce(c: float, f_th: float, orientation: Quat, f_add) -> float:
    """Golden-section minimization of the same 1-D least-squares objective.

    Deliberately avoids the closed form: this is the independent check that
    the projection formula solves the minimization exactly.
    """
    if not f_th > 0.0:
        raise ValueError("thrust command must be positive")
    f_add = np.ascontiguousarray(f_add, dtype=np.float64)
    z_body = _thrust_axis(orientation)

    def objective(gain: float) -> float:
        v = (gain - c) * f_th * z_body + f_add
        return float(np.dot(v, v))

    half_width = 10.0 * GRAVITY / f_th
    lo = c - half_width
    hi = c + half_width
    a = hi - _GOLDEN * (hi - lo)
    b = lo + _GOLDEN * (hi - lo)
    fa = objective(a)
    fb = objective(b)
    while hi - lo > 1e-9:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - _GOLDEN * (hi - lo)
            fa = objective(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + _GOLDEN * (hi - lo)
            fb = objective(b)
    return 0.5 * (lo + hi)


def _positions(flown) -> DoubleMatrix:
    arr = np.ascontiguousarray(flown, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] not in (3, 10):
        raise ValueError("flown states must be (M, 10) state rows or (M, 3) positions")
    return arr[:, 0:3]


def _closest_point_distances(flown, traj: DesiredTrajectory) -> DoubleMatrix:
    flown_p = _positions(flown)
    desired = traj.positions
    # (M, K) pairwise distances; fine at the sample counts we evaluate.
    diff = flown_p[:, None, :] - desired[None, :, :]
    return np.sqrt(np.einsum("mkd,mkd->mk", diff, diff)).min(axis=1)


def tte(flown, traj: DesiredTrajectory) -> float:
    """Mean closest-point distance between flown samples and the desired path."""
    return float(np.mean(_closest_point_distances(flown, traj)))


def pp(flown, traj: DesiredTrajectory, radius: float = 0.30) -> float:
    """Fraction of flown samples within ``radius`` of the desired path."""
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    d = _closest_point_distances(flown, traj)
    return float(np.mean(d <= radius))


def collisions(
    flown, scene: SplatScene, drone_radius: float = 0.15
) -> tuple[list[tuple[int, int]], float | None, float]:
    """Collision events, events-per-metre rate, and flown path length.

    A sample collides when any gaussian with opacity at least 0.5 contains it
    within 3 Mahalanobis units after the covariance picks up the (scaled)
    vehicle radius on its diagonal. The scene's alignment maps flown world
    positions into the splat frame first. A zero-length path has an undefined
    rate, returned as None.
    """
    if not drone_radius > 0.0:
        raise ValueError("drone_radius must be positive")
    flown_p = _positions(flown)
    path_length = float(np.sum(np.linalg.norm(np.diff(flown_p, axis=0), axis=1)))

    radius = drone_radius
    points = flown_p
    if scene.alignment is not None:
        points = scene.alignment.apply(flown_p)
        radius = drone_radius * scene.alignment.scale

    solid = scene.opacities >= 0.5
    hit = np.zeros(points.shape[0], dtype=bool)
    if np.any(solid) and points.shape[0] > 0:
        means = scene.means[solid]
        scales = scene.scales[solid]
        rotations = scene.rotations[solid]
        for g in range(means.shape[0]):
            rot = Quat.from_array(rotations[g]).to_matrix()
            cov = rot @ np.diag(scales[g] ** 2) @ rot.T + radius**2 * np.eye(3)
            inv = np.linalg.inv(cov)
            delta = points - means[g]
            m2 = np.einsum("md,de,me->m", delta, inv, delta)
            hit |= m2 <= 9.0 + 1e-12

    events: list[tuple[int, int]] = []
    k = 0
    while k < hit.size:
        if hit[k]:
            start = k
            while k + 1 < hit.size and hit[k + 1]:
                k += 1
            events.append((start, k))
        k += 1

    rate = None if path_length == 0.0 else len(events) / path_length
    return events, rate, path_length


def compute_metrics(
    flown,
    traj: DesiredTrajectory,
    scene: SplatScene | None = None,
    proximity_radius: float = 0.30,
    drone_radius: float = 0.15,
) -> MetricsReport:
    """Bundle the tracking metrics (and collision metrics when given a scene)."""
    d = _closest_point_distances(flown, traj)
    if scene is not None:
        events, rate, length = collisions(flown, scene, drone_radius)
    else:
        # No scene, no collision check: rate is unknown rather than zero.
        flown_p = _positions(flown)
        events, rate, length = [], None, float(
            np.sum(np.linalg.norm(np.diff(flown_p, axis=0), axis=1))
        )
    return MetricsReport(
        tracking_error=float(np.mean(d)),
        tracking_error_max=float(np.max(d)),
        proximity_fraction=float(np.mean(d <= proximity_radius)),
        proximity_radius=proximity_radius,
        path_length=length,
        collision_events=events,
        collision_rate=rate,
    )
