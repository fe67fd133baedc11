"""Synthetic ground-truth trips (straight and curved roads).

Positions are integrated with the same discrete unicycle used by the filter, so
noise-free IMU differencing reproduces them exactly.
"""

from __future__ import annotations

import math

import numpy as np

from ..sensor_sim import Trajectory, substream
from ..state_estimation import wrap_angle

MAX_LATERAL_ACCEL = 1.5  # m/s^2
MIN_SPEED, MAX_SPEED = 6.0, 25.0


def integrate(t0: float, dt: float, x0: float, y0: float, heading0: float,
              speed: np.ndarray, yaw_rate: np.ndarray) -> Trajectory:
    """Roll the unicycle forward; ``yaw_rate[k]`` maps sample k onto k+1."""
    n = len(speed)
    px, py, h = np.empty(n), np.empty(n), np.empty(n)
    px[0], py[0], h[0] = x0, y0, wrap_angle(heading0)
    for k in range(n - 1):
        px[k + 1] = px[k] + speed[k] * math.cos(h[k]) * dt
        py[k + 1] = py[k] + speed[k] * math.sin(h[k]) * dt
        h[k + 1] = wrap_angle(h[k] + yaw_rate[k] * dt)
    return Trajectory(t0 + dt * np.arange(n), px, py, h, np.asarray(speed, dtype=float))


def straight(duration: float, speed: float, dt: float = 0.1, heading: float = 0.0) -> Trajectory:
    n = int(round(duration / dt)) + 1
    return integrate(0.0, dt, 0.0, 0.0, heading, np.full(n, float(speed)), np.zeros(n))


def _piecewise(rng, n, dt, draw, seg_lo=5.0, seg_hi=20.0):
    out = np.empty(n)
    k = 0
    while k < n:
        length = max(1, int(rng.uniform(seg_lo, seg_hi) / dt))
        out[k:k + length] = draw()
        k += length
    return out


def random_trip(rng: np.random.Generator, duration: float, dt: float = 0.1,
                curved: bool = True) -> Trajectory:
    """Random speed profile with piecewise-constant acceleration; optional turns."""
    n = int(round(duration / dt)) + 1
    accel = _piecewise(rng, n, dt, lambda: rng.uniform(-0.4, 0.4))
    speed = np.empty(n)
    speed[0] = rng.uniform(10.0, 20.0)
    for k in range(n - 1):
        nxt = speed[k] + accel[k] * dt
        if not MIN_SPEED <= nxt <= MAX_SPEED:
            nxt = speed[k]
        speed[k + 1] = nxt
    if curved:
        turn = _piecewise(rng, n, dt, lambda: rng.uniform(-1.0, 1.0) if rng.random() < 0.5 else 0.0,
                          seg_lo=4.0, seg_hi=15.0)
        yaw = turn * MAX_LATERAL_ACCEL / np.maximum(speed, MIN_SPEED)
    else:
        yaw = np.zeros(n)
    return integrate(0.0, dt, 0.0, 0.0, rng.uniform(-math.pi, math.pi), speed, yaw)


def synthetic_fleet(count: int, seed: int, min_duration: float = 60.0, max_duration: float = 300.0,
                    dt: float = 0.1) -> list[tuple[str, Trajectory]]:
    """``count`` trips alternating straight and curved roads, deterministic in ``seed``."""
    fleet = []
    for i in range(count):
        rng = substream(seed, "trajectory", i)
        duration = round(rng.uniform(min_duration, max_duration), 1)
        curved = i % 2 == 1
        name = f"{'curved' if curved else 'straight'}_{i:03d}"
        fleet.append((name, random_trip(rng, duration, dt, curved=curved)))
    return fleet
