"""EKF localization: unicycle motion model driven by IMU, position-only GPS updates.

State vector ``x = [px, py, heading, speed]`` (m, m, rad, m/s).
IMU input ``u = [accel, yaw_rate]`` with additive white noise ``w ~ N(0, Q)``.

Prediction::

    x_k = f(x_{k-1}, u_k)
    P_k = F P F^T + L Q L^T

Update (GPS measures ``H x``)::

    K = P H^T (H P H^T + R)^-1
    x^ = x + K (z - H x)
    P^ = P - K H P
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 4
H_GPS = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])

# Default initial uncertainty: 1 m^2, 1 m^2, 0.01 rad^2, 0.25 (m/s)^2
P0_DIAG = (1.0, 1.0, 0.01, 0.25)


class EstimationError(ValueError):
    """Raised for non-finite inputs or broken covariance invariants."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w == -math.pi:
        return math.pi
    return w


@dataclass(frozen=True, slots=True)
class VehicleState:
    px: float
    py: float
    heading: float
    speed: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.px, self.py, self.heading, self.speed)):
            raise EstimationError(f"non-finite vehicle state: {self}")
        if not -math.pi < self.heading <= math.pi:
            object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.heading, self.speed])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])


@dataclass(frozen=True, slots=True)
class ImuSample:
    """IMU reading that drives the state from ``t - dt`` to ``t``."""

    t: float
    accel: float
    yaw_rate: float


@dataclass(frozen=True, slots=True)
class GpsFix:
    t: float
    px: float
    py: float
    # Harness bookkeeping only; the estimator and detectors never read it.
    spoofed: bool = False

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])


def _spd(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not np.allclose(m, m.T, rtol=1e-9, atol=0.0):
        raise EstimationError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"{name} is not positive definite") from exc
    return m


@dataclass(frozen=True)
class EkfConfig:
    """Filter constants. ``Q`` is ordered (accel, yaw_rate)."""

    dt: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: np.diag([0.05**2, 0.005**2]))
    R_gps: np.ndarray = field(default_factory=lambda: np.eye(2) * 1.5**2)
    H: np.ndarray = field(default_factory=lambda: H_GPS.copy())

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise EstimationError("dt must be positive")
        object.__setattr__(self, "Q", _spd(self.Q, "Q"))
        object.__setattr__(self, "R_gps", _spd(self.R_gps, "R_gps"))
        H = np.asarray(self.H, dtype=float)
        if H.shape != (2, STATE_DIM):
            raise EstimationError("H must be 2x4")
        object.__setattr__(self, "H", H)
        L = _noise_jacobian(self.dt)
        # constant for a given config, so computed once
        object.__setattr__(self, "_LQLt", L @ self.Q @ L.T)

    @classmethod
    def from_sigmas(cls, dt: float, accel_sigma: float, gyro_sigma: float,
                    gps_sigma: float) -> "EkfConfig":
        return cls(dt=dt, Q=np.diag([accel_sigma**2, gyro_sigma**2]),
                   R_gps=np.eye(2) * gps_sigma**2)


def check_covariance(P: np.ndarray, name: str = "P") -> None:
    """Symmetric to 1e-9 relative and PSD up to -1e-9 * trace."""
    if P.shape != (STATE_DIM, STATE_DIM) or not np.all(np.isfinite(P)):
        raise EstimationError(f"{name} must be a finite 4x4 matrix")
    scale = max(abs(np.trace(P)), 1e-300)
    if np.max(np.abs(P - P.T)) > 1e-9 * scale:
        raise EstimationError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(P).min() < -1e-9 * scale:
        raise EstimationError(f"{name} is not positive semidefinite")


def initial_covariance() -> np.ndarray:
    return np.diag(P0_DIAG)


def _check_step(x, u: ImuSample, dt: float) -> None:
    if not dt > 0:
        raise EstimationError("dt must be positive")
    if not all(map(math.isfinite, (*x, u.accel, u.yaw_rate))):
        raise EstimationError(f"non-finite motion input: x={list(x)}, u={u}")


def _f(x, accel: float, yaw_rate: float, dt: float) -> np.ndarray:
    px, py, h, v = x
    return np.array([
        px + v * math.cos(h) * dt,
        py + v * math.sin(h) * dt,
        wrap_angle(h + yaw_rate * dt),
        v + accel * dt,
    ])


def _state_jacobian(x, dt: float) -> np.ndarray:
    h, v = x[2], x[3]
    c, s = math.cos(h), math.sin(h)
    return np.array([
        [1.0, 0.0, -v * s * dt, c * dt],
        [0.0, 1.0, v * c * dt, s * dt],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _noise_jacobian(dt: float) -> np.ndarray:
    return np.array([
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, dt],
        [dt, 0.0],
    ])


def _jacobians(x, dt: float) -> tuple[np.ndarray, np.ndarray]:
    return _state_jacobian(x, dt), _noise_jacobian(dt)


def motion_step(state: VehicleState, u: ImuSample, dt: float) -> VehicleState:
    """Advance one IMU step; position uses the pre-update heading and speed."""
    x = state.as_array()
    _check_step(x, u, dt)
    return VehicleState.from_array(_f(x, u.accel, u.yaw_rate, dt))


def jacobians(state: VehicleState, u: ImuSample, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State Jacobian F (4x4) and noise Jacobian L (4x2) of the motion model."""
    x = state.as_array()
    _check_step(x, u, dt)
    return _jacobians(x, dt)


def predict_arrays(x: np.ndarray, P: np.ndarray, u: ImuSample,
                   cfg: EkfConfig) -> tuple[np.ndarray, np.ndarray]:
    """Array-level prediction shared by the EKF and the RSU predictor."""
    xs = x.tolist()
    _check_step(xs, u, cfg.dt)
    F = _state_jacobian(xs, cfg.dt)
    P_new = F @ P @ F.T + cfg._LQLt
    return _f(xs, u.accel, u.yaw_rate, cfg.dt), 0.5 * (P_new + P_new.T)


def update_arrays(x: np.ndarray, P: np.ndarray, z: np.ndarray,
                  cfg: EkfConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    H = cfg.H
    innovation = z - H @ x
    S = H @ P @ H.T + cfg.R_gps
    try:
        K = np.linalg.solve(S, H @ P).T  # P H^T S^-1, S symmetric
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular innovation covariance") from exc
    x_new = x + K @ innovation
    x_new[2] = wrap_angle(x_new[2])
    P_new = P - K @ H @ P
    return x_new, 0.5 * (P_new + P_new.T), innovation


def ekf_predict(x_hat: VehicleState, P_hat: np.ndarray, u: ImuSample,
                cfg: EkfConfig) -> tuple[VehicleState, np.ndarray]:
    check_covariance(P_hat, "P_hat")
    x, P = predict_arrays(x_hat.as_array(), P_hat, u, cfg)
    return VehicleState.from_array(x), P


def ekf_update(x: VehicleState, P: np.ndarray, z: GpsFix,
               cfg: EkfConfig) -> tuple[VehicleState, np.ndarray, np.ndarray]:
    """Fuse one GPS fix. Returns the posterior and the innovation ``z - Hx``."""
    zv = z.position
    if not np.all(np.isfinite(zv)):
        raise EstimationError(f"non-finite GPS fix: {z}")
    x_new, P_new, innovation = update_arrays(x.as_array(), P, zv, cfg)
    return VehicleState.from_array(x_new), P_new, innovation
