"""Receding-horizon tracking controller with privileged model parameters.

Each control step picks the closest upcoming reference sample (monotonic
forward search), then solves a box-constrained tracking problem over an
N-step horizon by sequential quadratic programming: roll out the incumbent
plan, linearize the discrete dynamics about it by finite differences, solve
the resulting time-varying LQR subproblem with a Riccati sweep, and accept
the clamped line-search candidate that lowers the true rollout cost.

State error is a plain component difference; the reference quaternion is
sign-aligned to the rollout quaternion first so the double cover never
produces a phantom 2-unit error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from numba import njit

from .dynamics import DroneParams, DroneState, rk4_step_array, rollout_array
from .flatness import DesiredTrajectory

DoubleMatrix = npt.NDArray[np.float64]

_LINESEARCH_STEPS = 6  # alpha = 1, 1/2, ... 1/32
_REG_INIT = 1e-6
_REG_MAX_TRIES = 8
_POSITION_DIVERGENCE_LIMIT = 1e3  # metres; far outside any scene we model


class ExpertDivergence(RuntimeError):
    """Solver produced a non-finite plan, or the closed loop left the workspace."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message if step_index is None else f"step {step_index}: {message}")
        self.step_index = step_index


def _default_q() -> DoubleMatrix:
    return np.diag([10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0])


def _default_r() -> DoubleMatrix:
    return np.diag([2.0, 0.5, 0.5, 0.5])


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    state_weights: DoubleMatrix = field(default_factory=_default_q)
    input_weights: DoubleMatrix = field(default_factory=_default_r)
    terminal_weights: DoubleMatrix | None = None  # defaults to 5x state_weights
    u_min: DoubleMatrix = field(default_factory=lambda: np.array([0.0, -6.0, -6.0, -6.0]))
    u_max: DoubleMatrix = field(default_factory=lambda: np.array([6.0, 6.0, 6.0, 6.0]))
    control_rate: float = 20.0
    sqp_iters: int = 5
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 steps")
        if not (self.control_rate > 0.0 and np.isfinite(self.control_rate)):
            raise ValueError("control_rate must be positive")
        if self.sqp_iters < 1:
            raise ValueError("sqp_iters must be at least 1")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        q = self._check_weights(self.state_weights, 10, "state_weights")
        r = self._check_weights(self.input_weights, 4, "input_weights")
        qn = self.terminal_weights
        qn = 5.0 * q if qn is None else self._check_weights(qn, 10, "terminal_weights")
        u_min = np.ascontiguousarray(self.u_min, dtype=np.float64)
        u_max = np.ascontiguousarray(self.u_max, dtype=np.float64)
        if u_min.shape != (4,) or u_max.shape != (4,):
            raise ValueError("input bounds must have shape (4,)")
        if not (np.all(np.isfinite(u_min)) and np.all(np.isfinite(u_max))):
            raise ValueError("input bounds must be finite")
        if np.any(u_min > u_max):
            raise ValueError("u_min must not exceed u_max")
        for arr in (q, r, qn, u_min, u_max):
            arr.setflags(write=False)
        object.__setattr__(self, "state_weights", q)
        object.__setattr__(self, "input_weights", r)
        object.__setattr__(self, "terminal_weights", qn)
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)

    @staticmethod
    def _check_weights(w, n: int, name: str) -> DoubleMatrix:
        mat = np.ascontiguousarray(w, dtype=np.float64)
        if mat.shape == (n,):
            mat = np.ascontiguousarray(np.diag(mat))
        if mat.shape != (n, n):
            raise ValueError(f"{name} must be ({n},) diagonal or ({n}, {n})")
        if not np.all(np.isfinite(mat)):
            raise ValueError(f"{name} must be finite")
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError(f"{name} must be symmetric")
        if np.min(np.linalg.eigvalsh(mat)) < -1e-9:
            raise ValueError(f"{name} must be positive semidefinite")
        return mat

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate


@dataclass(frozen=True)
class MpcSolution:
    inputs: DoubleMatrix  # (N, 4), clamped to bounds
    predicted_states: DoubleMatrix  # (N+1, 10), rollout of inputs
    cost: float
    iterations: int


@dataclass(frozen=True)
class ClosedLoopResult:
    states: DoubleMatrix  # (M+1, 10)
    inputs: DoubleMatrix  # (M, 4)
    reference_indices: npt.NDArray[np.int64]  # (M,) window start per step
    costs: DoubleMatrix  # (M,) solver cost per step


def reference_window(
    traj: DesiredTrajectory, state: DroneState, last_index: int, horizon: int
) -> tuple[int, DoubleMatrix, DoubleMatrix]:
    """Closest upcoming reference sample and the padded horizon slice from it.

    Searches indices ``[last_index, last_index + 2*horizon]`` (clamped to the
    trajectory) so progress along the reference is monotonic even where the
    path crosses itself. Slices past the end repeat the terminal sample.
    """
    n_states = traj.states.shape[0]
    if not 0 <= last_index < n_states:
        raise ValueError(f"last_index {last_index} outside trajectory of {n_states} states")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    stop = min(last_index + 2 * horizon, n_states - 1)
    window = traj.states[last_index : stop + 1, 0:3]
    dists = np.linalg.norm(window - state.position, axis=1)
    k_star = last_index + int(np.argmin(dists))

    ref_states = np.empty((horizon + 1, 10))
    ref_inputs = np.empty((horizon, 4))
    for h in range(horizon + 1):
        ref_states[h] = traj.states[min(k_star + h, n_states - 1)]
    n_inputs = traj.inputs.shape[0]
    for h in range(horizon):
        ref_inputs[h] = traj.inputs[min(k_star + h, n_inputs - 1)]
    return k_star, ref_states, ref_inputs


@njit(cache=True, nogil=True)
def _state_errors(xs, ref_x):
    """Componentwise state errors with the reference quaternion sign-aligned."""
    n = xs.shape[0]
    out = np.empty((n, 10))
    for k in range(n):
        for i in range(6):
            out[k, i] = xs[k, i] - ref_x[k, i]
        dot = 0.0
        for i in range(6, 10):
            dot += xs[k, i] * ref_x[k, i]
        sign = 1.0 if dot >= 0.0 else -1.0
        for i in range(6, 10):
            out[k, i] = xs[k, i] - sign * ref_x[k, i]
    return out


@njit(cache=True, nogil=True)
def _trajectory_cost(xs, us, ref_x, ref_u, q_mat, r_mat, qn_mat):
    n = us.shape[0]
    dx = _state_errors(xs, ref_x)
    total = 0.0
    for k in range(n):
        total += dx[k] @ (q_mat @ dx[k])
        du = us[k] - ref_u[k]
        total += du @ (r_mat @ du)
    total += dx[n] @ (qn_mat @ dx[n])
    return total


@njit(cache=True, nogil=True)
def _linearize(xs, us, accel_gain, dt):
    """Finite-difference Jacobians of the discrete step along the rollout."""
    n = us.shape[0]
    a_all = np.empty((n, 10, 10))
    b_all = np.empty((n, 10, 4))
    for k in range(n):
        base = rk4_step_array(xs[k], us[k], accel_gain, dt)
        for i in range(10):
            h = 1e-6 * (1.0 + abs(xs[k, i]))
            xp = xs[k].copy()
            xp[i] += h
            a_all[k, :, i] = (rk4_step_array(xp, us[k], accel_gain, dt) - base) / h
        for i in range(4):
            h = 1e-6 * (1.0 + abs(us[k, i]))
            up = us[k].copy()
            up[i] += h
            b_all[k, :, i] = (rk4_step_array(xs[k], up, accel_gain, dt) - base) / h
    return a_all, b_all


@njit(cache=True, nogil=True)
def _cholesky_solve4(mat, rhs):
    """Solve the 4x4 SPD system against a block of right-hand sides.

    Returns (ok, solution); ok is False when a pivot is not positive, which
    the caller treats as "increase regularization and retry".
    """
    lower = np.zeros((4, 4))
    for i in range(4):
        for j in range(i + 1):
            acc = mat[i, j]
            for k in range(j):
                acc -= lower[i, k] * lower[j, k]
            if i == j:
                if acc <= 1e-12:
                    return False, rhs
                lower[i, i] = np.sqrt(acc)
            else:
                lower[i, j] = acc / lower[j, j]
    n_rhs = rhs.shape[1]
    sol = np.empty((4, n_rhs))
    for c in range(n_rhs):
        for i in range(4):
            acc = rhs[i, c]
            for k in range(i):
                acc -= lower[i, k] * sol[k, c]
            sol[i, c] = acc / lower[i, i]
        for i in range(3, -1, -1):
            acc = sol[i, c]
            for k in range(i + 1, 4):
                acc -= lower[k, i] * sol[k, c]
            sol[i, c] = acc / lower[i, i]
    return True, sol


@njit(cache=True, nogil=True)
def _backward_pass(a_all, b_all, dx, du, q_mat, r_mat, qn_mat, reg):
    """Riccati sweep for the LQR subproblem; returns feedforward/feedback gains."""
    n = a_all.shape[0]
    k_ff = np.zeros((n, 4))
    k_fb = np.zeros((n, 4, 10))
    v_x = 2.0 * qn_mat @ dx[n]
    v_xx = 2.0 * qn_mat.copy()
    for k in range(n - 1, -1, -1):
        a_k = a_all[k]
        b_k = b_all[k]
        q_x = 2.0 * q_mat @ dx[k] + a_k.T @ v_x
        q_u = 2.0 * r_mat @ du[k] + b_k.T @ v_x
        q_xx = 2.0 * q_mat + a_k.T @ v_xx @ a_k
        q_uu = 2.0 * r_mat + b_k.T @ v_xx @ b_k
        q_ux = b_k.T @ v_xx @ a_k
        for i in range(4):
            q_uu[i, i] += reg
        rhs = np.empty((4, 11))
        rhs[:, 0] = q_u
        rhs[:, 1:] = q_ux
        ok, sol = _cholesky_solve4(q_uu, rhs)
        if not ok:
            return k_ff, k_fb, False
        kf = -sol[:, 0]
        fb = -sol[:, 1:]
        k_ff[k] = kf
        k_fb[k] = fb
        v_x = q_x + fb.T @ (q_uu @ kf) + fb.T @ q_u + q_ux.T @ kf
        v_xx = q_xx + fb.T @ q_uu @ fb + fb.T @ q_ux + q_ux.T @ fb
        v_xx = 0.5 * (v_xx + v_xx.T)
    return k_ff, k_fb, True


@njit(cache=True, nogil=True)
def _forward_pass(
    x0, xs_inc, us_inc, k_ff, k_fb, ref_x, ref_u, q_mat, r_mat, qn_mat,
    accel_gain, dt, u_min, u_max, alpha,
):
    n = us_inc.shape[0]
    xs = np.empty((n + 1, 10))
    us = np.empty((n, 4))
    xs[0] = x0
    for k in range(n):
        u = us_inc[k] + alpha * k_ff[k] + k_fb[k] @ (xs[k] - xs_inc[k])
        for i in range(4):
            if u[i] < u_min[i]:
                u[i] = u_min[i]
            elif u[i] > u_max[i]:
                u[i] = u_max[i]
        us[k] = u
        xs[k + 1] = rk4_step_array(xs[k], u, accel_gain, dt)
    cost = _trajectory_cost(xs, us, ref_x, ref_u, q_mat, r_mat, qn_mat)
    return xs, us, cost


def solve_mpc(
    state: DroneState,
    params: DroneParams,
    ref_states: DoubleMatrix,
    ref_inputs: DoubleMatrix,
    config: MpcConfig,
    warm_start: DoubleMatrix | None = None,
) -> MpcSolution:
    """Track the reference slice from ``state`` over the config horizon.

    ``warm_start`` is an (N, 4) input plan; when omitted a constant hover
    plan seeds the first rollout. Every returned input is inside the box
    bounds.
    """
    n = config.horizon
    ref_x = np.ascontiguousarray(ref_states, dtype=np.float64)
    ref_u = np.ascontiguousarray(ref_inputs, dtype=np.float64)
    if ref_x.shape != (n + 1, 10):
        raise ValueError(f"reference states must be ({n + 1}, 10)")
    if ref_u.shape != (n, 4):
        raise ValueError(f"reference inputs must be ({n}, 4)")
    if warm_start is None:
        us = np.tile([params.hover_thrust, 0.0, 0.0, 0.0], (n, 1))
    else:
        us = np.array(warm_start, dtype=np.float64)
    if us.shape != (n, 4):
        raise ValueError(f"warm start must be ({n}, 4)")
    np.clip(us, config.u_min, config.u_max, out=us)

    x0 = state.as_array()
    q_mat = config.state_weights
    r_mat = config.input_weights
    qn_mat = config.terminal_weights
    dt = config.dt
    accel_gain = params.accel_gain

    xs = rollout_array(x0, us, accel_gain, dt)
    cost = float(_trajectory_cost(xs, us, ref_x, ref_u, q_mat, r_mat, qn_mat))
    if not np.isfinite(cost):
        raise ExpertDivergence("initial rollout cost is not finite")

    reg = _REG_INIT
    iterations = 0
    for _ in range(config.sqp_iters):
        iterations += 1
        a_all, b_all = _linearize(xs, us, accel_gain, dt)
        dx = _state_errors(xs, ref_x)
        du = us - ref_u
        ok = False
        for _ in range(_REG_MAX_TRIES):
            k_ff, k_fb, ok = _backward_pass(a_all, b_all, dx, du, q_mat, r_mat, qn_mat, reg)
            if ok:
                break
            reg *= 10.0
        if not ok:
            break
        improved = False
        alpha = 1.0
        for _ in range(_LINESEARCH_STEPS):
            xs_new, us_new, cost_new = _forward_pass(
                x0, xs, us, k_ff, k_fb, ref_x, ref_u, q_mat, r_mat, qn_mat,
                accel_gain, dt, config.u_min, config.u_max, alpha,
            )
            if np.isfinite(cost_new) and cost_new < cost:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        decrease = cost - cost_new
        xs, us, cost = xs_new, us_new, float(cost_new)
        reg = max(reg * 0.5, 1e-8)
        if decrease < config.tol:
            break

    if not np.all(np.isfinite(us)):
        raise ExpertDivergence("solver produced non-finite inputs")
    return MpcSolution(inputs=us, predicted_states=xs, cost=cost, iterations=iterations)


def closed_loop_run(
    initial_state: DroneState,
    params: DroneParams,
    traj: DesiredTrajectory,
    duration: float,
    config: MpcConfig,
    start_index: int = 0,
) -> ClosedLoopResult:
    """Run the controller for ``duration`` seconds against the true dynamics.

    The simulated plant and the solver's internal model share ``params`` (the
    expert is privileged). ``start_index`` anchors the first reference-window
    search, for runs that begin partway along the trajectory. Raises
    ExpertDivergence with the failing step index when a solve blows up or the
    state leaves the workspace.
    """
    if not duration > 0.0:
        raise ValueError("duration must be positive")
    if abs(traj.dt - config.dt) > 1e-9:
        raise ValueError(
            f"trajectory sample period {traj.dt} must match the control period {config.dt}"
        )
    n_steps = int(round(config.control_rate * duration))
    states = np.empty((n_steps + 1, 10))
    inputs = np.empty((n_steps, 4))
    ref_indices = np.empty(n_steps, dtype=np.int64)
    costs = np.empty(n_steps)

    states[0] = initial_state.as_array()
    last_index = start_index
    plan: DoubleMatrix | None = None
    for k in range(n_steps):
        current = DroneState.from_array(states[k])
        if not np.all(np.isfinite(states[k])) or np.linalg.norm(current.position) > _POSITION_DIVERGENCE_LIMIT:
            raise ExpertDivergence("state left the workspace", step_index=k)
        last_index, ref_x, ref_u = reference_window(traj, current, last_index, config.horizon)
        warm = None
        if plan is not None:
            warm = np.vstack([plan[1:], plan[-1:]])
        try:
            solution = solve_mpc(current, params, ref_x, ref_u, config, warm_start=warm)
        except ExpertDivergence as exc:
            raise ExpertDivergence(str(exc), step_index=k) from exc
        plan = solution.inputs
        inputs[k] = plan[0]
        ref_indices[k] = last_index
        costs[k] = solution.cost
        states[k + 1] = rk4_step_array(states[k], inputs[k], params.accel_gain, config.dt)
    if not np.all(np.isfinite(states[n_steps])):
        raise ExpertDivergence("state left the workspace", step_index=n_steps)
    return ClosedLoopResult(states=states, inputs=inputs, reference_indices=ref_indices, costs=costs)
