"""Reduced 10-state drone model and its forward integration.

State layout (10 components): position (3), world-frame velocity (3),
body-to-world orientation quaternion stored (x, y, z, w).
Input layout (4 components): normalized collective thrust command followed by
body angular rates (rad/s).

The world z axis points down, so gravity contributes +9.81 m/s² along z and
the thrust command accelerates the vehicle along the *negative* body z axis.
Rotational accelerations are not modeled: body rates are commanded directly
and enter only through the quaternion kinematics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt
from numba import njit

from .geom import Quat, Vector3, _as_vec3

GRAVITY = 9.81

DoubleMatrix = npt.NDArray[np.float64]

STATE_DIM = 10
INPUT_DIM = 4


@dataclass(frozen=True)
class DroneParams:
    """Physical parameters: thrust gain (force per command unit) and mass.

    The ratio ``accel_gain = thrust_gain / mass`` is the acceleration produced
    per unit of thrust command; it is the single lumped constant the adaptation
    analysis estimates.
    """

    thrust_gain: float = 6.03
    mass: float = 1.0

    def __post_init__(self) -> None:
        if not (self.thrust_gain > 0.0 and np.isfinite(self.thrust_gain)):
            raise ValueError("thrust_gain must be positive and finite")
        if not (self.mass > 0.0 and np.isfinite(self.mass)):
            raise ValueError("mass must be positive and finite")

    @property
    def accel_gain(self) -> float:
        """Acceleration per unit thrust command, m/s² per command unit."""
        return self.thrust_gain / self.mass

    @property
    def hover_thrust(self) -> float:
        """Thrust command balancing gravity exactly."""
        return GRAVITY / self.accel_gain


@dataclass(frozen=True)
class DroneState:
    position: Vector3
    velocity: Vector3
    orientation: Quat

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _as_vec3(self.position))
        object.__setattr__(self, "velocity", _as_vec3(self.velocity))
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("state components must be finite")
        if abs(self.orientation.norm() - 1.0) > 1e-6:
            raise ValueError("orientation must be a unit quaternion within 1e-6")

    @staticmethod
    def hover(position: Sequence[float] | Vector3 = (0.0, 0.0, 0.0)) -> DroneState:
        return DroneState(_as_vec3(position), np.zeros(3), Quat.identity())

    @staticmethod
    def from_array(x: npt.NDArray[np.float64]) -> DroneState:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != (STATE_DIM,):
            raise ValueError(f"expected a {STATE_DIM}-vector, got shape {arr.shape}")
        return DroneState(arr[0:3].copy(), arr[3:6].copy(), Quat.from_array(arr[6:10]))

    def as_array(self) -> DoubleMatrix:
        out = np.empty(STATE_DIM, dtype=np.float64)
        out[0:3] = self.position
        out[3:6] = self.velocity
        out[6:10] = self.orientation.as_array()
        return out


@dataclass(frozen=True)
class ControlInput:
    thrust: float
    body_rates: Vector3

    def __post_init__(self) -> None:
        object.__setattr__(self, "body_rates", _as_vec3(self.body_rates))
        if not (np.isfinite(self.thrust) and self.thrust >= 0.0):
            raise ValueError("thrust command must be finite and non-negative")
        if not np.all(np.isfinite(self.body_rates)):
            raise ValueError("body rates must be finite")

    @staticmethod
    def hover(params: DroneParams) -> ControlInput:
        return ControlInput(params.hover_thrust, np.zeros(3))

    @staticmethod
    def from_array(u: npt.NDArray[np.float64]) -> ControlInput:
        arr = np.asarray(u, dtype=np.float64)
        if arr.shape != (INPUT_DIM,):
            raise ValueError(f"expected a {INPUT_DIM}-vector, got shape {arr.shape}")
        return ControlInput(float(arr[0]), arr[1:4].copy())

    def as_array(self) -> DoubleMatrix:
        out = np.empty(INPUT_DIM, dtype=np.float64)
        out[0] = self.thrust
        out[1:4] = self.body_rates
        return out


@dataclass(frozen=True)
class StateDerivative:
    """Time derivative of a DroneState: (ṗ, v̇, q̇) with q̇ as an (x, y, z, w) 4-vector."""

    position_rate: Vector3
    velocity_rate: Vector3
    orientation_rate: DoubleMatrix


@njit(cache=True, nogil=True)
def state_derivative_array(x: DoubleMatrix, u: DoubleMatrix, accel_gain: float) -> DoubleMatrix:
    """Right-hand side of the model on raw arrays. Hot path shared by all solvers."""
    out = np.empty(10, dtype=np.float64)
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    qx, qy, qz, qw = x[6], x[7], x[8], x[9]
    # Body z axis expressed in world coordinates (third rotation-matrix column).
    zbx = 2.0 * (qx * qz + qy * qw)
    zby = 2.0 * (qy * qz - qx * qw)
    zbz = 1.0 - 2.0 * (qx * qx + qy * qy)
    a = accel_gain * u[0]
    out[3] = -a * zbx
    out[4] = -a * zby
    out[5] = GRAVITY - a * zbz
    wx, wy, wz = u[1], u[2], u[3]
    out[6] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[7] = 0.5 * (qw * wy + qz * wx - qx * wz)
    out[8] = 0.5 * (qw * wz + qx * wy - qy * wx)
    out[9] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    return out


@njit(cache=True, nogil=True)
def rk4_step_array(x: DoubleMatrix, u: DoubleMatrix, accel_gain: float, dt: float) -> DoubleMatrix:
    """One classical Runge-Kutta step with zero-order-held input, then quaternion renormalization."""
    k1 = state_derivative_array(x, u, accel_gain)
    k2 = state_derivative_array(x + 0.5 * dt * k1, u, accel_gain)
    k3 = state_derivative_array(x + 0.5 * dt * k2, u, accel_gain)
    k4 = state_derivative_array(x + dt * k3, u, accel_gain)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    qn = np.sqrt(out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9])
    out[6] /= qn
    out[7] /= qn
    out[8] /= qn
    out[9] /= qn
    return out


@njit(cache=True, nogil=True)
def rollout_array(x0: DoubleMatrix, controls: DoubleMatrix, accel_gain: float, dt: float) -> DoubleMatrix:
    """Integrate a (K, 4) input sequence; returns the (K+1, 10) state sequence."""
    n_steps = controls.shape[0]
    out = np.empty((n_steps + 1, 10), dtype=np.float64)
    out[0] = x0
    for k in range(n_steps):
        out[k + 1] = rk4_step_array(out[k], controls[k], accel_gain, dt)
    return out


def derivative(state: DroneState, control: ControlInput, params: DroneParams) -> StateDerivative:
    """Continuous-time state derivative.

    ``ṗ = v``; ``v̇ = g·e_z − accel_gain·thrust·z_body``; ``q̇ = ½ q ⊗ (0, ω)``.
    """
    d = state_derivative_array(state.as_array(), control.as_array(), params.accel_gain)
    return StateDerivative(d[0:3].copy(), d[3:6].copy(), d[6:10].copy())


def step(state: DroneState, control: ControlInput, params: DroneParams, dt: float) -> DroneState:
    """Advance the state by one RK4 step of length ``dt`` (seconds)."""
    if not (dt > 0.0 and np.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    return DroneState.from_array(rk4_step_array(state.as_array(), control.as_array(), params.accel_gain, dt))


def rollout(
    state: DroneState,
    controls: Sequence[ControlInput] | DoubleMatrix,
    params: DroneParams,
    dt: float,
) -> DoubleMatrix:
    """Integrate an input sequence from ``state``.

    ``controls`` is either a sequence of :class:`ControlInput` or a (K, 4)
    array in the input layout. Returns the (K+1, 10) array of states in the
    state layout, with row 0 equal to the initial state.
    """
    if not (dt > 0.0 and np.isfinite(dt)):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    if isinstance(controls, np.ndarray):
        u_arr = np.ascontiguousarray(controls, dtype=np.float64)
        if u_arr.ndim != 2 or u_arr.shape[1] != INPUT_DIM:
            raise ValueError(f"control array must have shape (K, {INPUT_DIM}), got {controls.shape}")
    else:
        if len(controls) == 0:
            return state.as_array()[None, :].copy()
        u_arr = np.stack([c.as_array() for c in controls])
    if u_arr.shape[0] == 0:
        return state.as_array()[None, :].copy()
    if not np.all(np.isfinite(u_arr)):
        raise ValueError("control sequence contains non-finite values")
    return rollout_array(state.as_array(), u_arr, params.accel_gain, dt)
