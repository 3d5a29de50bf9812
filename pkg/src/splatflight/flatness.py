"""Waypoints -> smoothest-snap spline -> sampled desired trajectory.

Each spline segment is a degree-7 polynomial in normalized local time. The
position axes are C4-continuous at interior knots with rest (zero velocity /
acceleration / jerk) boundary conditions; yaw runs through the same solver
with C2 continuity and rest rate/acceleration at the ends. Free coefficients
minimize the integral of the squared 4th derivative, solved as one KKT linear
system per axis.

Sampling inverts the model dynamics algebraically: the commanded thrust
direction is the unit vector along ``g·e_z - p̈``, the thrust magnitude
follows from its norm, and body rates come from the analytic time derivative
of the tilt-plus-yaw orientation quaternion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from .dynamics import GRAVITY, ControlInput, DroneParams, DroneState
from .geom import Quat, Vector3, _as_vec3, quat_multiply

DoubleMatrix = npt.NDArray[np.float64]

POLY_DEGREE = 7
N_COEFF = POLY_DEGREE + 1


@dataclass(frozen=True)
class Waypoint:
    position: Vector3
    yaw: float
    time: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _as_vec3(self.position))
        if not (np.all(np.isfinite(self.position)) and np.isfinite(self.yaw) and np.isfinite(self.time)):
            raise ValueError("waypoint fields must be finite")


@dataclass(frozen=True)
class PiecewisePoly:
    """Per-segment degree-7 coefficients over normalized local time.

    ``coeffs[s, k, c]`` multiplies ``τ̂**k`` on segment ``s`` for channel
    ``c`` in (x, y, z, yaw); ``τ̂ = (t - times[s]) / (times[s+1] - times[s])``.
    """

    times: DoubleMatrix  # (S+1,) knot times, strictly increasing
    coeffs: DoubleMatrix  # (S, 8, 4)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64)
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two knot times")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("knot times must be strictly increasing")
        if coeffs.shape != (times.size - 1, N_COEFF, 4):
            raise ValueError(f"coeffs must have shape (S, {N_COEFF}, 4)")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def evaluate(self, t: float, order: int = 0) -> DoubleMatrix:
        """Channel values (x, y, z, yaw) of the ``order``-th time derivative at ``t``."""
        times = self.times
        s = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2))
        span = times[s + 1] - times[s]
        tau = (t - times[s]) / span
        out = np.zeros(4)
        for k in range(order, N_COEFF):
            factor = 1.0
            for d in range(order):
                factor *= k - d
            out += self.coeffs[s, k] * factor * tau ** (k - order)
        return out / span**order


@dataclass(frozen=True)
class DesiredTrajectory:
    """States/inputs sampled at a fixed control rate, plus the params used to invert."""

    states: DoubleMatrix  # (K+1, 10) in the dynamics state layout
    inputs: DoubleMatrix  # (K, 4) in the dynamics input layout
    dt: float
    params: DroneParams

    def __post_init__(self) -> None:
        states = np.ascontiguousarray(self.states, dtype=np.float64)
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 10:
            raise ValueError("states must be (K+1, 10)")
        if inputs.shape != (states.shape[0] - 1, 4):
            raise ValueError("inputs must be (K, 4) with one fewer row than states")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        norms = np.linalg.norm(states[:, 6:10], axis=1)
        if states.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("desired-state quaternions must be unit length")
        states.setflags(write=False)
        inputs.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n_steps(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def timestamps(self) -> DoubleMatrix:
        return np.arange(self.states.shape[0]) * self.dt

    @property
    def positions(self) -> DoubleMatrix:
        return self.states[:, 0:3]

    def state_at(self, k: int) -> DroneState:
        return DroneState.from_array(self.states[k])

    def control_at(self, k: int) -> ControlInput:
        return ControlInput.from_array(self.inputs[k])


def _derivative_row(tau: float, order: int, span: float) -> DoubleMatrix:
    """Row of basis-derivative values: d^order/dt^order of τ̂^k at local τ̂."""
    row = np.zeros(N_COEFF)
    for k in range(order, N_COEFF):
        factor = 1.0
        for d in range(order):
            factor *= k - d
        row[k] = factor * tau ** (k - order)
    return row / span**order


def _snap_cost_block(span: float) -> DoubleMatrix:
    """Gram matrix of the 4th-derivative inner product for one segment."""
    q = np.zeros((N_COEFF, N_COEFF))
    for i in range(4, N_COEFF):
        fi = math.factorial(i) / math.factorial(i - 4)
        for j in range(4, N_COEFF):
            fj = math.factorial(j) / math.factorial(j - 4)
            q[i, j] = fi * fj / (i + j - 7)
    return q / span**7


def _solve_axis(
    values: DoubleMatrix, times: DoubleMatrix, continuity_orders: int, boundary_orders: Sequence[int]
) -> DoubleMatrix:
    """Smoothest-snap coefficients for one scalar channel through ``values``.

    continuity_orders: highest derivative matched at interior knots.
    boundary_orders: derivative orders pinned to zero at both endpoints.
    """
    n_seg = times.size - 1
    spans = np.diff(times)
    n_var = N_COEFF * n_seg

    rows: list[DoubleMatrix] = []
    rhs: list[float] = []

    def constraint(seg: int, tau: float, order: int, value: float, other: tuple[int, float] | None = None):
        row = np.zeros(n_var)
        row[seg * N_COEFF : (seg + 1) * N_COEFF] = _derivative_row(tau, order, spans[seg])
        if other is not None:
            oseg, otau = other
            row[oseg * N_COEFF : (oseg + 1) * N_COEFF] -= _derivative_row(otau, order, spans[oseg])
        rows.append(row)
        rhs.append(value)

    for s in range(n_seg):
        constraint(s, 0.0, 0, float(values[s]))
        constraint(s, 1.0, 0, float(values[s + 1]))
    for s in range(n_seg - 1):
        for order in range(1, continuity_orders + 1):
            constraint(s, 1.0, order, 0.0, other=(s + 1, 0.0))
    for order in boundary_orders:
        constraint(0, 0.0, order, 0.0)
        constraint(n_seg - 1, 1.0, order, 0.0)

    a_mat = np.vstack(rows)
    b_vec = np.asarray(rhs)
    n_con = a_mat.shape[0]

    q_mat = np.zeros((n_var, n_var))
    for s in range(n_seg):
        block = slice(s * N_COEFF, (s + 1) * N_COEFF)
        q_mat[block, block] = _snap_cost_block(spans[s])
    q_mat += 1e-10 * np.eye(n_var)

    kkt = np.zeros((n_var + n_con, n_var + n_con))
    kkt[:n_var, :n_var] = 2.0 * q_mat
    kkt[:n_var, n_var:] = a_mat.T
    kkt[n_var:, :n_var] = a_mat
    full_rhs = np.concatenate([np.zeros(n_var), b_vec])
    try:
        sol = np.linalg.solve(kkt, full_rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"spline system is singular: {exc}") from exc
    return sol[:n_var].reshape(n_seg, N_COEFF)


def min_snap(waypoints: Sequence[Waypoint]) -> PiecewisePoly:
    """Fit the smoothest-snap piecewise polynomial through the waypoints."""
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    times = np.array([w.time for w in waypoints], dtype=np.float64)
    if np.any(np.diff(times) <= 0.0):
        raise ValueError("waypoint times must be strictly increasing (duplicates make the system singular)")
    positions = np.stack([w.position for w in waypoints])
    yaws = np.array([w.yaw for w in waypoints], dtype=np.float64)

    n_seg = times.size - 1
    coeffs = np.zeros((n_seg, N_COEFF, 4))
    for axis in range(3):
        coeffs[:, :, axis] = _solve_axis(positions[:, axis], times, continuity_orders=4, boundary_orders=(1, 2, 3))
    coeffs[:, :, 3] = _solve_axis(yaws, times, continuity_orders=2, boundary_orders=(1, 2))
    return PiecewisePoly(times, coeffs)


def flat_outputs_to_state(
    position: Vector3,
    velocity: Vector3,
    acceleration: Vector3,
    jerk: Vector3,
    yaw: float,
    yaw_rate: float,
    params: DroneParams,
) -> tuple[DroneState, ControlInput]:
    """Invert the dynamics at one sample of the flat outputs.

    Raises ValueError near the free-fall singularity (commanded thrust below
    0.1 g) and at the inverted-attitude singularity.
    """
    position = _as_vec3(position)
    velocity = _as_vec3(velocity)
    acceleration = _as_vec3(acceleration)
    jerk = _as_vec3(jerk)

    # Thrust must supply g·e_z - p̈ (world z points down).
    accel_cmd = np.array([0.0, 0.0, GRAVITY]) - acceleration
    norm = float(np.linalg.norm(accel_cmd))
    if norm <= 0.1 * GRAVITY:
        raise ValueError(f"commanded acceleration {norm:.3f} m/s² is inside the free-fall singularity")
    thrust = norm / params.accel_gain
    b = accel_cmd / norm

    if 1.0 + b[2] < 1e-8:
        raise ValueError("inverted-attitude singularity (thrust direction opposite world z)")
    s = math.sqrt(2.0 * (1.0 + b[2]))
    tilt = Quat(-b[1] / s, b[0] / s, 0.0, s / 2.0)
    half_yaw = 0.5 * yaw
    yaw_q = Quat(0.0, 0.0, math.sin(half_yaw), math.cos(half_yaw))
    q = quat_multiply(tilt, yaw_q).normalized()

    # ḃ = (I - b bᵀ) d/dt(g e_z - p̈) / ‖·‖, with d/dt(...) = -jerk.
    accel_cmd_dot = -jerk
    b_dot = (accel_cmd_dot - b * float(np.dot(b, accel_cmd_dot))) / norm
    s_dot = b_dot[2] / s
    tilt_dot = Quat(
        -b_dot[1] / s + b[1] * b_dot[2] / s**3,
        b_dot[0] / s - b[0] * b_dot[2] / s**3,
        0.0,
        0.5 * s_dot,
    )
    yaw_q_dot = Quat(0.0, 0.0, 0.5 * yaw_rate * math.cos(half_yaw), -0.5 * yaw_rate * math.sin(half_yaw))
    q_dot = Quat(
        *(quat_multiply(tilt_dot, yaw_q).as_array() + quat_multiply(tilt, yaw_q_dot).as_array())
    )
    body_rates = 2.0 * quat_multiply(q.conjugate(), q_dot).as_array()[0:3]

    state = DroneState(position, velocity, q)
    control = ControlInput(thrust, body_rates)
    return state, control


def sample_trajectory(spline: PiecewisePoly, control_rate: float, params: DroneParams) -> DesiredTrajectory:
    """Evaluate the spline at ``k / control_rate`` and invert each sample."""
    if not control_rate > 0.0:
        raise ValueError("control_rate must be positive")
    n_steps = int(round(spline.duration * control_rate))
    dt = 1.0 / control_rate
    t0 = float(spline.times[0])
    states = np.empty((n_steps + 1, 10))
    inputs_all = np.empty((n_steps + 1, 4))
    for k in range(n_steps + 1):
        t = t0 + min(k * dt, spline.duration)
        p = spline.evaluate(t, 0)
        v = spline.evaluate(t, 1)
        a = spline.evaluate(t, 2)
        j = spline.evaluate(t, 3)
        state, control = flat_outputs_to_state(p[0:3], v[0:3], a[0:3], j[0:3], p[3], v[3], params)
        states[k] = state.as_array()
        inputs_all[k] = control.as_array()
    return DesiredTrajectory(states, inputs_all[:n_steps], 1.0 / control_rate, params)


def figure_eight_waypoints(
    duration: float = 15.0,
    n_segments: int = 12,
    width: float = 2.0,
    height: float = 1.0,
    altitude: float = -1.5,
    yaw: float = 0.0,
) -> list[Waypoint]:
    """A closed figure-eight in the horizontal plane, rest-to-rest over ``duration``."""
    if n_segments < 4:
        raise ValueError("need at least 4 segments for a figure eight")
    pts = []
    for k in range(n_segments + 1):
        phase = 2.0 * np.pi * k / n_segments
        pts.append(
            Waypoint(
                position=np.array([width * np.sin(phase), height * np.sin(2.0 * phase), altitude]),
                yaw=yaw,
                time=duration * k / n_segments,
            )
        )
    return pts
