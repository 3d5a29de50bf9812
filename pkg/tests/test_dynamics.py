import numpy as np
import pytest

from splatflight.dynamics import (
    GRAVITY,
    ControlInput,
    DroneParams,
    DroneState,
    derivative,
    rollout,
    step,
)
from splatflight.geom import Quat


PARAMS = DroneParams(thrust_gain=6.03, mass=1.0)


def make_state(p=(0, 0, 0), v=(0, 0, 0), q=None):
    return DroneState(np.asarray(p, float), np.asarray(v, float), q or Quat.identity())


class TestDerivative:
    def test_hover_balance(self):
        d = derivative(make_state(), ControlInput.hover(PARAMS), PARAMS)
        np.testing.assert_allclose(d.position_rate, 0.0, atol=1e-15)
        np.testing.assert_allclose(d.velocity_rate, 0.0, atol=1e-12)
        np.testing.assert_allclose(d.orientation_rate, 0.0, atol=1e-15)

    def test_free_fall(self):
        d = derivative(make_state(), ControlInput(0.0, np.zeros(3)), PARAMS)
        np.testing.assert_allclose(d.velocity_rate, [0.0, 0.0, GRAVITY], atol=1e-15)

    def test_pure_yaw_rate(self):
        d = derivative(make_state(), ControlInput(PARAMS.hover_thrust, np.array([0.0, 0.0, 1.0])), PARAMS)
        np.testing.assert_allclose(d.orientation_rate, [0.0, 0.0, 0.5, 0.0], atol=1e-15)

    def test_quat_rate_matches_hamilton_product(self):
        # q̇ = ½ q ⊗ (ω, 0) for a handful of random attitudes and rates.
        rng = np.random.default_rng(21)
        for _ in range(20):
            q = Quat.from_array(rng.normal(size=4)).normalized()
            omega = rng.normal(size=3)
            d = derivative(make_state(q=q), ControlInput(1.0, omega), PARAMS)
            from splatflight.geom import quat_multiply

            expected = 0.5 * quat_multiply(q, Quat(omega[0], omega[1], omega[2], 0.0)).as_array()
            np.testing.assert_allclose(d.orientation_rate, expected, atol=1e-12)

    def test_thrust_direction_follows_attitude(self):
        # 90° roll: body z maps to world -y, thrust pushes along +y.
        q = Quat.from_axis_angle([1, 0, 0], np.pi / 2)
        d = derivative(make_state(q=q), ControlInput(1.0, np.zeros(3)), PARAMS)
        np.testing.assert_allclose(d.velocity_rate, [0.0, PARAMS.accel_gain, GRAVITY], atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ControlInput(np.nan, np.zeros(3))
        with pytest.raises(ValueError):
            make_state(v=(np.inf, 0, 0))


class TestStep:
    def test_free_fall_parabola(self):
        out = step(make_state(), ControlInput(0.0, np.zeros(3)), PARAMS, 0.5)
        assert abs(out.velocity[2] - 4.905) < 1e-12
        assert abs(out.position[2] - 1.22625) < 1e-12

    def test_hover_fixed_point(self):
        out = step(make_state(p=(1, 2, 3)), ControlInput.hover(PARAMS), PARAMS, 0.05)
        np.testing.assert_allclose(out.as_array(), make_state(p=(1, 2, 3)).as_array(), atol=1e-12)

    def test_constant_yaw_rate_matches_quaternion_exponential(self):
        # ω_z = π rad/s for 1 s in 20 steps under hover thrust.
        state = make_state()
        u = ControlInput(PARAMS.hover_thrust, np.array([0.0, 0.0, np.pi]))
        for _ in range(20):
            state = step(state, u, PARAMS, 0.05)
        expected = Quat.from_axis_angle([0, 0, 1], np.pi)
        q = state.orientation.as_array()
        if np.dot(q, expected.as_array()) < 0:
            q = -q
        np.testing.assert_allclose(q, expected.as_array(), atol=1e-6)
        np.testing.assert_allclose(state.position, 0.0, atol=1e-9)

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            step(make_state(), ControlInput.hover(PARAMS), PARAMS, 0.0)
        with pytest.raises(ValueError):
            step(make_state(), ControlInput.hover(PARAMS), PARAMS, -0.1)

    def test_quaternion_renormalized(self):
        state = make_state()
        u = ControlInput(PARAMS.hover_thrust, np.array([2.0, -1.0, 0.5]))
        for _ in range(100):
            state = step(state, u, PARAMS, 0.05)
            assert abs(state.orientation.norm() - 1.0) < 1e-12


class TestRollout:
    def test_empty_input_sequence(self):
        x = rollout(make_state(p=(1, 1, 1)), np.zeros((0, 4)), PARAMS, 0.05)
        assert x.shape == (1, 10)
        np.testing.assert_allclose(x[0], make_state(p=(1, 1, 1)).as_array())

    def test_hover_sequence_stationary(self):
        controls = [ControlInput.hover(PARAMS)] * 40
        x = rollout(make_state(p=(0, 0, -2)), controls, PARAMS, 0.05)
        assert x.shape == (41, 10)
        np.testing.assert_allclose(x, np.tile(x[0], (41, 1)), atol=1e-9)

    def test_free_fall_velocity_linear_in_time(self):
        u = np.zeros((20, 4))
        x = rollout(make_state(), u, PARAMS, 0.05)
        assert abs(x[-1, 5] - GRAVITY) < 1e-9
        times = np.arange(21) * 0.05
        np.testing.assert_allclose(x[:, 5], GRAVITY * times, atol=1e-9)

    def test_matches_repeated_step(self):
        rng = np.random.default_rng(31)
        u = np.column_stack(
            [
                rng.uniform(0.5, 2.5, size=8),
                rng.uniform(-1, 1, size=8),
                rng.uniform(-1, 1, size=8),
                rng.uniform(-1, 1, size=8),
            ]
        )
        x = rollout(make_state(), u, PARAMS, 0.05)
        state = make_state()
        for k in range(8):
            state = step(state, ControlInput.from_array(u[k]), PARAMS, 0.05)
            np.testing.assert_allclose(x[k + 1], state.as_array(), atol=1e-12)

    def test_rejects_nonfinite_controls(self):
        u = np.zeros((3, 4))
        u[1, 0] = np.nan
        with pytest.raises(ValueError):
            rollout(make_state(), u, PARAMS, 0.05)


class TestIntegrationAccuracy:
    def test_quaternion_norm_drift(self):
        # 10^4 steps under a tumbling rate command; norm must stay at 1 to 1e-9 per step.
        u = np.tile(np.array([PARAMS.hover_thrust, 0.7, -0.4, 1.1]), (10_000, 1))
        x = rollout(make_state(), u, PARAMS, 0.01)
        norms = np.linalg.norm(x[:, 6:10], axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_rk4_observed_order(self):
        # Smooth zero-order-held input profile; refine by repeating each held
        # input n times at dt/n so the commanded profile is unchanged.
        dt = 0.1
        k_steps = 10
        t = np.arange(k_steps) * dt
        u_base = np.column_stack(
            [
                PARAMS.hover_thrust + 0.4 * np.sin(2 * np.pi * t / 1.0),
                0.8 * np.sin(2 * np.pi * t / 0.7),
                0.6 * np.cos(2 * np.pi * t / 0.9),
                0.5 * np.sin(2 * np.pi * t / 1.3),
            ]
        )
        x0 = make_state()

        def endpoint(n: int) -> np.ndarray:
            u = np.repeat(u_base, n, axis=0)
            return rollout(x0, u, PARAMS, dt / n)[-1]

        ref = endpoint(32)
        e1 = np.linalg.norm(endpoint(1) - ref)
        e2 = np.linalg.norm(endpoint(2) - ref)
        e4 = np.linalg.norm(endpoint(4) - ref)
        order12 = np.log2(e1 / e2)
        order24 = np.log2(e2 / e4)
        assert order12 >= 3.5, f"observed order {order12:.2f}"
        assert order24 >= 3.5, f"observed order {order24:.2f}"


class TestParams:
    def test_accel_gain_and_hover(self):
        p = DroneParams(thrust_gain=6.03, mass=1.3)
        assert abs(p.accel_gain - 6.03 / 1.3) < 1e-15
        assert abs(p.accel_gain * p.hover_thrust - GRAVITY) < 1e-12

    @pytest.mark.parametrize("kwargs", [dict(thrust_gain=0.0), dict(mass=-1.0), dict(thrust_gain=np.nan)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            DroneParams(**{**dict(thrust_gain=6.03, mass=1.0), **kwargs})
