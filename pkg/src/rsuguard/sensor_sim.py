"""Ground-truth trajectories and synthetic IMU (10 Hz) / GPS (1 Hz) streams."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .state_estimation import GpsFix, ImuSample, VehicleState, wrap_angle

TRAJECTORY_HEADER = ("t", "x", "y", "heading", "speed")
_SPACING_RTOL = 1e-6


class TrajectoryError(ValueError):
    pass


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a name path.

    Names are hashed with crc32 so the mapping is stable across processes.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name))
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    px: np.ndarray
    py: np.ndarray
    heading: np.ndarray
    speed: np.ndarray

    def __post_init__(self) -> None:
        arrays = [np.asarray(a, dtype=float) for a in (self.t, self.px, self.py, self.heading, self.speed)]
        for name, a in zip(("t", "px", "py", "heading", "speed"), arrays):
            object.__setattr__(self, name, a)
        n = len(arrays[0])
        if n < 2:
            raise TrajectoryError("trajectory needs at least 2 samples")
        if any(len(a) != n for a in arrays):
            raise TrajectoryError("trajectory columns have different lengths")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise TrajectoryError("trajectory contains non-finite values")
        steps = np.diff(self.t)
        if np.any(steps <= 0):
            raise TrajectoryError("trajectory timestamps must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=_SPACING_RTOL, atol=1e-9):
            raise TrajectoryError("trajectory samples must be uniformly spaced")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def state(self, k: int) -> VehicleState:
        return VehicleState(float(self.px[k]), float(self.py[k]),
                            wrap_angle(float(self.heading[k])), float(self.speed[k]))

    def positions(self) -> np.ndarray:
        return np.column_stack([self.px, self.py])

    def arc_length(self) -> np.ndarray:
        """Cumulative polyline length at each sample, starting at 0."""
        seg = np.hypot(np.diff(self.px), np.diff(self.py))
        return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass(frozen=True)
class SensorNoiseConfig:
    gps_sigma: float = 1.5
    imu_accel_sigma: float = 0.05
    imu_gyro_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.gps_sigma, self.imu_accel_sigma, self.imu_gyro_sigma) < 0:
            raise ValueError("sensor sigmas must be non-negative")


def _resample(t, cols, dt):
    n = int(math.floor((t[-1] - t[0]) / dt + 1e-9)) + 1
    grid = t[0] + dt * np.arange(n)
    out = [np.interp(grid, t, c) for c in cols]
    return grid, out


def load_trajectory(path, dt: float = 0.1) -> Trajectory:
    """Read a ``t,x,y,heading,speed`` CSV, resampling to ``dt`` when needed."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_HEADER:
            raise TrajectoryError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRAJECTORY_HEADER):
                raise TrajectoryError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise TrajectoryError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise TrajectoryError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if len(rows) < 2:
        raise TrajectoryError(f"{path}: need at least 2 samples")
    data = np.array(rows)
    t = data[:, 0]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise TrajectoryError(f"{path}:{bad[0] + 3}: timestamps are not strictly increasing")

    steps = np.diff(t)
    if np.allclose(steps, dt, rtol=_SPACING_RTOL, atol=1e-9):
        return Trajectory(t, data[:, 1], data[:, 2], data[:, 3], data[:, 4])
    heading = np.unwrap(data[:, 3])  # shortest-arc interpolation
    grid, (px, py, h, v) = _resample(t, [data[:, 1], data[:, 2], heading, data[:, 4]], dt)
    h = np.array([wrap_angle(a) for a in h])
    return Trajectory(grid, px, py, h, v)


def save_trajectory(path, traj: Trajectory) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for row in zip(traj.t, traj.px, traj.py, traj.heading, traj.speed):
            w.writerow([repr(float(v)) for v in row])


def imu_inputs(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free (accel, yaw_rate) that map sample k onto sample k+1."""
    dt = traj.dt
    accel = np.diff(traj.speed) / dt
    dh = np.array([wrap_angle(a) for a in np.diff(traj.heading)])
    return accel, dh / dt


def synthesize_imu(traj: Trajectory, cfg: SensorNoiseConfig,
                   rng: np.random.Generator | None = None) -> list[ImuSample]:
    """One sample per trajectory step; sample k is stamped ``t[k+1]``."""
    if rng is None:
        rng = substream(cfg.seed, "imu")
    accel, yaw = imu_inputs(traj)
    n = len(accel)
    accel = accel + rng.normal(0.0, 1.0, n) * cfg.imu_accel_sigma
    yaw = yaw + rng.normal(0.0, 1.0, n) * cfg.imu_gyro_sigma
    return [ImuSample(float(t), float(a), float(w)) for t, a, w in zip(traj.t[1:], accel, yaw)]


def gps_epoch_indices(traj: Trajectory, period: float = 1.0) -> np.ndarray:
    """Sample indices at whole GPS periods after the trip start (excluding t0)."""
    stride = int(round(period / traj.dt))
    if stride < 1 or not math.isclose(stride * traj.dt, period, rel_tol=1e-6):
        raise TrajectoryError("GPS period must be a multiple of the IMU step")
    return np.arange(stride, len(traj), stride)


def synthesize_gps(traj: Trajectory, cfg: SensorNoiseConfig,
                   rng: np.random.Generator | None = None, period: float = 1.0) -> list[GpsFix]:
    if rng is None:
        rng = substream(cfg.seed, "gps")
    idx = gps_epoch_indices(traj, period)
    noise = rng.normal(0.0, 1.0, (len(idx), 2)) * cfg.gps_sigma
    return [GpsFix(float(traj.t[k]), float(traj.px[k] + e[0]), float(traj.py[k] + e[1]))
            for k, e in zip(idx, noise)]
