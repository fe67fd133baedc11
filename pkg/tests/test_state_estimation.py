import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsuguard.state_estimation import (
    EkfConfig,
    EstimationError,
    GpsFix,
    ImuSample,
    VehicleState,
    check_covariance,
    ekf_predict,
    ekf_update,
    initial_covariance,
    jacobians,
    motion_step,
    predict_arrays,
    wrap_angle,
)


def random_spd(rng, n=4):
    A = rng.normal(size=(n, n))
    return A @ A.T + 0.1 * np.eye(n)


def oracle_predict(x, P, a, w, dt, Q):
    """Textbook EKF prediction written out independently of the package."""
    px, py, h, v = x
    x_new = np.array([px + v * np.cos(h) * dt, py + v * np.sin(h) * dt, h + w * dt, v + a * dt])
    x_new[2] = (x_new[2] + np.pi) % (2 * np.pi) - np.pi
    F = np.eye(4)
    F[0, 2], F[0, 3] = -v * np.sin(h) * dt, np.cos(h) * dt
    F[1, 2], F[1, 3] = v * np.cos(h) * dt, np.sin(h) * dt
    L = np.zeros((4, 2))
    L[3, 0] = L[2, 1] = dt
    P_new = F @ P @ F.T + L @ Q @ L.T
    return x_new, (P_new + P_new.T) / 2


def oracle_update(x, P, z, R):
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 1] = 1.0
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    P_new = P - K @ H @ P
    x_new = x + K @ (z - H @ x)
    x_new[2] = (x_new[2] + np.pi) % (2 * np.pi) - np.pi
    return x_new, (P_new + P_new.T) / 2


class TestMotionStep:
    def test_straight_line(self):
        s = motion_step(VehicleState(0, 0, 0, 10), ImuSample(0.1, 0, 0), 0.1)
        assert (s.px, s.py, s.heading, s.speed) == pytest.approx((1, 0, 0, 10))

    def test_due_north(self):
        s = motion_step(VehicleState(0, 0, math.pi / 2, 10), ImuSample(0.1, 0, 0), 0.1)
        assert (s.px, s.py, s.heading, s.speed) == pytest.approx((0, 1, math.pi / 2, 10), abs=1e-12)

    def test_position_uses_pre_update_heading_and_speed(self):
        s = motion_step(VehicleState(0, 0, 0, 10), ImuSample(0.1, 2.0, 0.5), 0.1)
        assert (s.px, s.py, s.heading, s.speed) == pytest.approx((1.0, 0.0, 0.05, 10.2))

    def test_heading_wraps(self):
        s = motion_step(VehicleState(0, 0, 3.1, 1), ImuSample(0.1, 0, 1.0), 0.1)
        assert -math.pi < s.heading <= math.pi
        assert s.heading == pytest.approx(3.2 - 2 * math.pi)

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_input_rejected(self, bad):
        with pytest.raises(EstimationError):
            motion_step(VehicleState(0, 0, 0, 10), ImuSample(0.1, bad, 0), 0.1)

    def test_non_positive_dt_rejected(self):
        with pytest.raises(EstimationError):
            motion_step(VehicleState(0, 0, 0, 10), ImuSample(0.1, 0, 0), 0.0)

    def test_vehicle_state_rejects_non_finite(self):
        with pytest.raises(EstimationError):
            VehicleState(0, math.nan, 0, 1)


class TestWrapAngle:
    def test_pi_maps_to_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    @given(st.floats(-100, 100))
    def test_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


class TestJacobians:
    def test_zero_step_limit(self):
        F, L = jacobians(VehicleState(3, -2, 0.7, 12), ImuSample(0, 0.3, 0.1), 1e-12)
        np.testing.assert_allclose(F, np.eye(4), atol=1e-10)
        np.testing.assert_allclose(L, 0, atol=1e-10)

    def test_direct_entry(self):
        F, _ = jacobians(VehicleState(0, 0, 0, 10), ImuSample(0.1, 0, 0), 0.1)
        assert F[0, 3] == pytest.approx(0.1)

    def test_finite_differences_over_random_states(self, rng):
        dt, eps = 0.1, 1e-6
        for _ in range(100):
            # keep heading away from the wrap seam so differences stay smooth
            x = np.array([rng.normal(0, 100), rng.normal(0, 100), rng.uniform(-3, 3), rng.uniform(0, 30)])
            a, w = rng.normal(0, 1), rng.normal(0, 0.2)
            u = ImuSample(0.1, a, w)
            F, L = jacobians(VehicleState.from_array(x), u, dt)

            def f(xx, aa=a, ww=w):
                return motion_step(VehicleState.from_array(xx), ImuSample(0.1, aa, ww), dt).as_array()

            F_num = np.column_stack([(f(x + eps * e) - f(x - eps * e)) / (2 * eps) for e in np.eye(4)])
            L_num = np.column_stack([
                (f(x, a + eps, w) - f(x, a - eps, w)) / (2 * eps),
                (f(x, a, w + eps) - f(x, a, w - eps)) / (2 * eps),
            ])
            np.testing.assert_allclose(F, F_num, rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(L, L_num, rtol=1e-6, atol=1e-6)


class TestPredict:
    def test_noiseless_certain_prior_stays_certain(self):
        cfg = EkfConfig(Q=np.diag([1e-300, 1e-300]))
        _, P = ekf_predict(VehicleState(0, 0, 0.2, 5), np.zeros((4, 4)), ImuSample(0.1, 1, 0.1), cfg)
        np.testing.assert_allclose(P, 0, atol=1e-200)

    def test_without_process_noise_only_F_acts(self, rng):
        cfg = EkfConfig(Q=np.diag([1e-300, 1e-300]))
        P0 = random_spd(rng)
        x = VehicleState(1, 2, 0.4, 8)
        _, P = ekf_predict(x, P0, ImuSample(0.1, 0, 0), cfg)
        F, _ = jacobians(x, ImuSample(0.1, 0, 0), cfg.dt)
        assert np.trace(P) == pytest.approx(np.trace(F @ P0 @ F.T), rel=1e-12)

    def test_matches_matrix_oracle(self, rng):
        for _ in range(50):
            x = np.array([*rng.normal(0, 50, 2), rng.uniform(-math.pi, math.pi), rng.uniform(0, 30)])
            P = random_spd(rng)
            Q = np.diag(rng.uniform(0.001, 0.1, 2) ** 2)
            cfg = EkfConfig(Q=Q)
            u = ImuSample(0.1, rng.normal(), rng.normal(0, 0.1))
            xs, P_new = ekf_predict(VehicleState.from_array(x), P, u, cfg)
            x_o, P_o = oracle_predict(x, P, u.accel, u.yaw_rate, 0.1, Q)
            np.testing.assert_allclose(xs.as_array(), x_o, rtol=0, atol=1e-12)
            np.testing.assert_allclose(P_new, P_o, rtol=0, atol=1e-12 * max(1.0, np.abs(P_o).max()))

    def test_rejects_bad_covariance(self, ekf_cfg):
        P = np.eye(4)
        P[0, 1] = 0.5  # asymmetric
        with pytest.raises(EstimationError):
            ekf_predict(VehicleState(0, 0, 0, 1), P, ImuSample(0.1, 0, 0), ekf_cfg)
        with pytest.raises(EstimationError):
            ekf_predict(VehicleState(0, 0, 0, 1), -np.eye(4), ImuSample(0.1, 0, 0), ekf_cfg)

    def test_shared_with_array_form(self, ekf_cfg, rng):
        x, P = np.array([1.0, 2.0, 0.3, 9.0]), random_spd(rng)
        u = ImuSample(0.1, 0.2, 0.01)
        a = predict_arrays(x, P, u, ekf_cfg)
        b = ekf_predict(VehicleState.from_array(x), P, u, ekf_cfg)
        assert np.array_equal(a[0], b[0].as_array()) and np.array_equal(a[1], b[1])


class TestUpdate:
    def test_zero_innovation_leaves_state(self, ekf_cfg):
        x = VehicleState(5, 6, 0.1, 10)
        x_new, _, innov = ekf_update(x, initial_covariance(), GpsFix(1.0, 5, 6), ekf_cfg)
        np.testing.assert_allclose(x_new.as_array(), x.as_array(), atol=1e-15)
        np.testing.assert_array_equal(innov, [0, 0])

    def test_distrusted_measurement_is_ignored(self):
        cfg = EkfConfig(R_gps=np.eye(2) * 1.5**2 * 1e9)
        x = VehicleState(0, 0, 0, 10)
        x_new, _, _ = ekf_update(x, initial_covariance(), GpsFix(1.0, 30, -40), cfg)
        assert np.hypot(x_new.px, x_new.py) < 1e-3

    def test_matches_matrix_oracle(self, rng):
        for _ in range(50):
            x = np.array([*rng.normal(0, 50, 2), rng.uniform(-1, 1), rng.uniform(0, 30)])
            P = random_spd(rng)
            R = np.diag(rng.uniform(0.5, 3, 2) ** 2)
            z = x[:2] + rng.normal(0, 2, 2)
            xs, P_new, innov = ekf_update(VehicleState.from_array(x), P, GpsFix(1.0, *z), EkfConfig(R_gps=R))
            x_o, P_o = oracle_update(x, P, z, R)
            np.testing.assert_allclose(xs.as_array(), x_o, rtol=0, atol=1e-12 * max(1.0, np.abs(x_o).max()))
            np.testing.assert_allclose(P_new, P_o, rtol=0, atol=1e-12 * max(1.0, np.abs(P_o).max()))
            np.testing.assert_allclose(innov, z - x[:2], atol=1e-12)

    def test_update_shrinks_trace(self, ekf_cfg, rng):
        for _ in range(20):
            P = random_spd(rng)
            _, P_new, _ = ekf_update(VehicleState(0, 0, 0, 1), P, GpsFix(1.0, 1, 1), ekf_cfg)
            assert np.trace(P_new) <= np.trace(P)
            check_covariance(P_new)

    def test_rejects_non_finite_fix(self, ekf_cfg):
        with pytest.raises(EstimationError):
            ekf_update(VehicleState(0, 0, 0, 1), initial_covariance(), GpsFix(1.0, math.nan, 0), ekf_cfg)


class TestConfig:
    def test_initial_covariance(self):
        np.testing.assert_array_equal(np.diag(initial_covariance()), [1, 1, 0.01, 0.25])

    @pytest.mark.parametrize("kw", [{"dt": 0}, {"Q": np.zeros((2, 2))}, {"R_gps": -np.eye(2)}])
    def test_invalid(self, kw):
        with pytest.raises(EstimationError):
            EkfConfig(**kw)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-0.3, 0.3)), min_size=1, max_size=60),
       st.floats(0.01, 1.0), st.floats(0.5, 3.0))
def test_covariance_stays_psd(inputs, gps_sigma, q_scale):
    cfg = EkfConfig.from_sigmas(0.1, 0.05 * q_scale, 0.005 * q_scale, gps_sigma)
    x, P = VehicleState(0, 0, 0, 10), initial_covariance()
    for k, (a, w) in enumerate(inputs, start=1):
        x, P = ekf_predict(x, P, ImuSample(0.1 * k, a, w), cfg)
        if k % 10 == 0:
            x, P, _ = ekf_update(x, P, GpsFix(0.1 * k, x.px + 1, x.py - 1), cfg)
        check_covariance(P)


def test_noiseless_tracking(straight_trip, curved_trip):
    from rsuguard.sensor_sim import SensorNoiseConfig, synthesize_gps, synthesize_imu

    quiet = SensorNoiseConfig(0.0, 0.0, 0.0)
    for traj in (straight_trip, curved_trip):
        cfg = EkfConfig.from_sigmas(0.1, 1e-9, 1e-9, 1e-6)
        x, P = traj.state(0), initial_covariance() * 1e-12
        gps = {round(f.t, 9): f for f in synthesize_gps(traj, quiet)}
        for k, u in enumerate(synthesize_imu(traj, quiet)[:1000], start=1):
            x, P = ekf_predict(x, P, u, cfg)
            if round(u.t, 9) in gps:
                x, P, _ = ekf_update(x, P, gps[round(u.t, 9)], cfg)
            assert np.hypot(x.px - traj.px[k], x.py - traj.py[k]) < 1e-6
