"""Roadside units: placement, ranging, single-RSU localization, secure channel, predictor.

The predictor dead-reckons from the last RSU fix using IMU only. Nothing in this
module reads GPS fixes.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .sensor_sim import Trajectory
from .state_estimation import (
    EkfConfig,
    ImuSample,
    VehicleState,
    _f,
    predict_arrays,
    wrap_angle,
)

MIN_RANGE = 0.01


class RsuError(RuntimeError):
    pass


class InsufficientRangesError(RsuError):
    pass


class NoFixError(RsuError):
    """Localization failed; the caller should fall back to the predictor."""


@dataclass(frozen=True)
class RsuSite:
    coord: tuple[float, float]
    service_radius: float = 500.0
    broadcast_rate: float = 10.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "coord", (float(self.coord[0]), float(self.coord[1])))
        if not self.service_radius > 0:
            raise ValueError("service radius must be positive")


@dataclass(frozen=True)
class RangeSample:
    t: float
    rsu_id: int
    range: float
    snr: float


@dataclass(frozen=True)
class RsuFix:
    t_emitted: float
    t_available: float
    position: tuple[float, float]
    covariance: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        cov = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "covariance", cov)
        if self.t_available < self.t_emitted:
            raise ValueError("fix cannot become available before it is emitted")
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=1e-9, atol=1e-12):
            raise ValueError("fix covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-9 * max(np.trace(cov), 1e-300):
            raise ValueError("fix covariance must be positive semidefinite")

    @property
    def t(self) -> float:
        return self.t_available

    def to_json(self) -> str:
        return json.dumps({
            "t_emitted": self.t_emitted,
            "t_available": self.t_available,
            "position": list(self.position),
            "covariance": self.covariance.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "RsuFix":
        d = json.loads(text)
        return cls(d["t_emitted"], d["t_available"], tuple(d["position"]), np.array(d["covariance"]))


@dataclass(frozen=True)
class RangeBatch:
    """Ranges from one site, delivered to the vehicle at ``t_available``."""

    t_emitted: float
    t_available: float
    site: RsuSite
    ranges: tuple[RangeSample, ...]

    @property
    def t(self) -> float:
        return self.t_available


# ---------------------------------------------------------------- placement


def place_rsus(traj: Trajectory, spacing: float, service_radius: float = 500.0, *,
               lateral_offset: float = 0.0, broadcast_rate: float = 10.0) -> list[RsuSite]:
    """Sites every ``spacing`` metres of arc length, starting at arc 0.

    ``lateral_offset`` shifts each site to the left of the direction of travel.
    """
    if not spacing > 0:
        raise ValueError("RSU spacing must be positive")
    arc = traj.arc_length()
    total = arc[-1]
    n_sites = int(math.floor(total / spacing + 1e-9)) + 1
    targets = spacing * np.arange(n_sites)
    xs = np.interp(targets, arc, traj.px)
    ys = np.interp(targets, arc, traj.py)
    sites = []
    for s, x, y in zip(targets, xs, ys):
        j = int(np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(arc) - 2))
        tx, ty = traj.px[j + 1] - traj.px[j], traj.py[j + 1] - traj.py[j]
        norm = math.hypot(tx, ty) or 1.0
        x += -ty / norm * lateral_offset
        y += tx / norm * lateral_offset
        sites.append(RsuSite((x, y), service_radius, broadcast_rate))
    return sites


def site_array(sites: Sequence[RsuSite]) -> np.ndarray:
    return np.array([s.coord for s in sites], dtype=float).reshape(-1, 2)


def serving_site(sites: Sequence[RsuSite], coords: np.ndarray, pos) -> int | None:
    """Index of the nearest site whose service circle contains ``pos``."""
    if not len(sites):
        return None
    d = np.hypot(coords[:, 0] - pos[0], coords[:, 1] - pos[1])
    i = int(np.argmin(d))
    return i if d[i] <= sites[i].service_radius else None


# ---------------------------------------------------------------- ranging


def snr_db(range_m: float, sigma_rsu: float) -> float:
    return 10.0 * math.log10(range_m**2 / sigma_rsu**2)


def sample_range(truth_pos, site: RsuSite, sigma_rsu: float, rng: np.random.Generator, *,
                 t: float = 0.0, rsu_id: int = 0) -> RangeSample | None:
    if not sigma_rsu > 0:
        raise ValueError("sigma_rsu must be positive")
    dist = math.hypot(truth_pos[0] - site.coord[0], truth_pos[1] - site.coord[1])
    if dist > site.service_radius:
        return None
    r = max(dist + sigma_rsu * rng.standard_normal(), MIN_RANGE)
    return RangeSample(t, rsu_id, r, snr_db(r, sigma_rsu))


# ---------------------------------------------------------------- localization


def odometry_displacements(range_times: Sequence[float], odometry: Sequence[ImuSample],
                           prior: VehicleState, dt: float) -> np.ndarray:
    """Dead-reckoned displacement from each range time to the last one.

    Heading and speed at the first range time are recovered by rolling the prior
    back through the odometry, then the motion model is integrated forward.
    """
    t0, tk = range_times[0], range_times[-1]
    used = [u for u in odometry if t0 + 1e-9 < u.t <= tk + 1e-9]
    expected = int(round((tk - t0) / dt))
    if len(used) != expected:
        raise InsufficientRangesError(
            f"odometry covers {len(used)} steps, {expected} needed between ranges")
    h0 = prior.heading - dt * sum(u.yaw_rate for u in used)
    v0 = prior.speed - dt * sum(u.accel for u in used)
    x = np.array([0.0, 0.0, wrap_angle(h0), v0])
    pos_at = {round(t0, 6): x[:2].copy()}
    for u in used:
        x = _f(x, u.accel, u.yaw_rate, dt)
        pos_at[round(u.t, 6)] = x[:2].copy()
    try:
        pts = np.array([pos_at[round(t, 6)] for t in range_times])
    except KeyError as exc:
        raise InsufficientRangesError(f"range time {exc} is not on the odometry grid") from None
    return pts[-1] - pts


def _residuals(p, anchors, z):
    d = p - anchors
    dist = np.hypot(d[:, 0], d[:, 1])
    return dist - z, d, dist


def localize_G(ranges: Sequence[RangeSample], site: RsuSite, odometry: Sequence[ImuSample],
               prior: VehicleState, *, sigma_rsu: float, dt: float = 0.1,
               latency: float = 0.1, max_iter: int = 50, tol: float = 1e-10,
               ftol: float = 1e-10) -> RsuFix:
    """Position at the last range time from a short range sequence plus odometry.

    Minimises ``sum_i (|p - D_i - c| - z_i)^2`` by Gauss-Newton with backtracking,
    starting from the prior. ``R = sigma^2 (J^T J)^-1`` at the solution.

    Iteration stops once a step moves less than ``tol`` metres or lowers the cost
    by less than the fraction ``ftol``. Near-collinear geometry leaves a flat
    valley where the cost barely moves; the fix then comes back with a wide
    covariance rather than no fix at all.
    """
    if len(ranges) < 3:
        raise InsufficientRangesError(f"need at least 3 ranges, got {len(ranges)}")
    ranges = sorted(ranges, key=lambda r: r.t)
    times = [r.t for r in ranges]
    z = np.array([r.range for r in ranges])
    disp = odometry_displacements(times, odometry, prior, dt)
    # range i was taken at p - disp_i, so |p - (c + disp_i)| = z_i
    anchors = np.asarray(site.coord) + disp

    p = prior.position.astype(float)
    res, d, dist = _residuals(p, anchors, z)
    cost = res @ res
    converged = False
    for _ in range(max_iter):
        J = d / np.maximum(dist, 1e-12)[:, None]
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        alpha = 1.0
        for _ in range(40):
            cand = p + alpha * step
            res_c, d_c, dist_c = _residuals(cand, anchors, z)
            cost_c = res_c @ res_c
            if cost_c <= cost:
                break
            alpha *= 0.5
        else:
            converged = True  # no descent direction left: stationary point
            break
        moved = alpha * np.linalg.norm(step)
        p, res, d, dist, cost_prev, cost = cand, res_c, d_c, dist_c, cost, cost_c
        if moved < tol or cost_prev - cost <= ftol * max(cost_prev, 1e-12):
            converged = True
            break
    if not converged:
        raise NoFixError(f"Gauss-Newton did not converge in {max_iter} iterations")

    J = d / np.maximum(dist, 1e-12)[:, None]
    info = J.T @ J + 1e-9 * np.eye(2)
    cov = sigma_rsu**2 * np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    t_k = times[-1]
    return RsuFix(t_k, t_k + latency, (p[0], p[1]), cov)


def fix_std(fix: RsuFix) -> float:
    """Largest 1-sigma axis of the fix covariance ellipse."""
    return math.sqrt(max(np.linalg.eigvalsh(fix.covariance).max(), 0.0))


def gaussian_fix(truth_pos, t: float, sigma_rsu: float, rng: np.random.Generator,
                 latency: float = 0.1) -> RsuFix:
    """RSU fix with isotropic N(0, sigma^2) position error (abstract localizer)."""
    e = rng.standard_normal(2) * sigma_rsu
    return RsuFix(t, t + latency, (truth_pos[0] + e[0], truth_pos[1] + e[1]),
                  np.eye(2) * sigma_rsu**2)


# ---------------------------------------------------------------- channel


class Codec(Protocol):
    def encode(self, data: bytes) -> bytes: ...

    def decode(self, data: bytes) -> bytes: ...


class IdentityCodec:
    def encode(self, data: bytes) -> bytes:
        return data

    def decode(self, data: bytes) -> bytes:
        return data


class Base64Codec:
    """Stand-in for a real cipher; exercises the envelope round-trip."""

    def encode(self, data: bytes) -> bytes:
        return base64.b64encode(data)

    def decode(self, data: bytes) -> bytes:
        return base64.b64decode(data)


@dataclass(frozen=True)
class Envelope:
    t_available: float
    payload: bytes


class LatencyViolation(AssertionError):
    pass


@dataclass
class SecureChannel:
    """Serialize, encode and hold a fix for a fixed latency."""

    latency: float = 0.1
    codec: Codec = field(default_factory=IdentityCodec)

    def send(self, fix: RsuFix) -> Envelope:
        t_av = fix.t_emitted + self.latency
        stamped = RsuFix(fix.t_emitted, t_av, fix.position, fix.covariance)
        return Envelope(t_av, self.codec.encode(stamped.to_json().encode()))

    def receive(self, env: Envelope, now: float) -> RsuFix:
        if now + 1e-9 < env.t_available:
            raise LatencyViolation(f"fix consumed at {now} before it is available at {env.t_available}")
        return RsuFix.from_json(self.codec.decode(env.payload).decode())


# ---------------------------------------------------------------- predictor


@dataclass(frozen=True)
class RsuPredictor:
    x: np.ndarray
    P: np.ndarray
    anchored_at: float

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_array(self.x)

    @property
    def position(self) -> np.ndarray:
        return self.x[:2].copy()

    @property
    def position_cov(self) -> np.ndarray:
        return self.P[:2, :2].copy()


def predictor_anchor(fix: RsuFix, heading: float, speed: float, *,
                     heading_var: float = 0.05, speed_var: float = 1.0) -> RsuPredictor:
    x = np.array([fix.position[0], fix.position[1], wrap_angle(heading), speed], dtype=float)
    P = np.zeros((4, 4))
    P[:2, :2] = fix.covariance
    P[2, 2] = heading_var
    P[3, 3] = speed_var
    return RsuPredictor(x, P, fix.t_emitted)


def predictor_step(pred: RsuPredictor, u: ImuSample, cfg: EkfConfig) -> RsuPredictor:
    x, P = predict_arrays(pred.x, pred.P, u, cfg)
    return RsuPredictor(x, P, pred.anchored_at)
