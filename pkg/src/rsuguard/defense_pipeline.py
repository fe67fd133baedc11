"""Per-event orchestration of localization, spoofing detection, GPS isolation and RSU correction.

Events arrive in availability order: IMU samples drive the EKF and the RSU
predictor, GPS fixes are scored and (when benign) fused, RSU fixes overwrite the
EKF and re-anchor the predictor. On the transition into isolation the EKF is
overwritten once with the predictor's GPS-free estimate.

The heading and speed given to each anchor come from a small GPS-free track
filter that fuses only RSU fixes, so the predictor never inherits velocity
errors dragged in by spoofed GPS.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rsu_infra import (
    NoFixError,
    RangeBatch,
    RsuError,
    RsuFix,
    RsuPredictor,
    fix_std,
    localize_G,
    predictor_anchor,
    predictor_step,
)
from .spoof_detector import (
    CHI2,
    CUSUM,
    DETECTORS,
    IFOREST,
    FeatureVector,
    FeatureWindow,
    IsolationForest,
    chi2_verdict,
    compute_nees,
    compute_rsu_features,
    cusum_step,
    score,
    vote,
)
from .state_estimation import (
    EkfConfig,
    GpsFix,
    ImuSample,
    VehicleState,
    check_covariance,
    initial_covariance,
    predict_arrays,
    update_arrays,
)

log = logging.getLogger(__name__)

_PRIORITY = {ImuSample: 0, GpsFix: 1, RsuFix: 2, RangeBatch: 2}
ANCHOR_SOURCES = ("rsu_track", "ekf", "fixed")
EPOCH_COLUMNS = ("t", "nees", "r_rsu", "s_rsu", "verdict_iforest", "verdict_chi2", "verdict_cusum",
                 "est_x", "est_y", "true_x", "true_y", "spoofed", "isolated")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    detector: str = IFOREST
    # None: RSU correction on for the iforest detector, off for the benchmarks
    rsu_correction: bool | None = None
    gating: bool = True
    reinstate_after: int = 3
    chi2_confidence: float = 0.95
    cusum_drift: float = 3.0
    cusum_threshold: float = 10.0
    window: int = 3
    # where anchors take heading/speed from: GPS-free RSU track, the EKF, or the
    # EKF values with the fixed variances below
    anchor_source: str = "rsu_track"
    anchor_heading_var: float = 0.05
    anchor_speed_var: float = 1.0
    latency_compensation: bool = True
    sigma_rsu: float = 0.25
    max_fix_std: float = 1.0
    debug: bool = False

    def __post_init__(self) -> None:
        if self.detector not in DETECTORS:
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.reinstate_after < 1:
            raise ValueError("reinstate_after must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.anchor_source not in ANCHOR_SOURCES:
            raise ValueError(f"unknown anchor source {self.anchor_source!r}")

    @property
    def corrects(self) -> bool:
        if self.rsu_correction is None:
            return self.detector == IFOREST
        return self.rsu_correction


@dataclass
class EpochRecord:
    t: float
    nees: float
    r_rsu: float
    s_rsu: float
    verdict_iforest: int
    verdict_chi2: int
    verdict_cusum: int
    est_x: float
    est_y: float
    true_x: float
    true_y: float
    spoofed: bool
    isolated: bool
    fused: bool = False
    since_anchor: float = 0.0
    score_iforest: float = 0.0

    def verdict(self, detector: str) -> int:
        return getattr(self, f"verdict_{detector}")


def reinstate_policy(benign_streak: int, verdict: int, required: int = 3) -> tuple[bool, int]:
    """Advance the benign-verdict counter of an isolated GPS.

    Returns ``(reinstate, new_streak)``; GPS comes back after ``required``
    consecutive benign verdicts.
    """
    streak = benign_streak + 1 if verdict == -1 else 0
    return streak >= required, streak


@dataclass
class RsuAnchorEvent:
    """Bookkeeping for the copy-semantics invariant."""

    t: float
    predictor_x: np.ndarray
    predictor_P: np.ndarray
    ekf_x: np.ndarray
    ekf_P: np.ndarray
    overwritten: bool


class DefensePipeline:
    """Single-writer pipeline for one trip."""

    def __init__(self, ekf_cfg: EkfConfig, cfg: PipelineConfig, initial: VehicleState, t0: float,
                 forest: IsolationForest | None = None, P0: np.ndarray | None = None):
        if cfg.detector == IFOREST and cfg.gating and forest is None:
            raise PipelineError("iforest detector selected but no model supplied")
        self.ekf_cfg = ekf_cfg
        self.cfg = cfg
        self.forest = forest
        self.x = initial.as_array()
        self.P = initial_covariance() if P0 is None else np.array(P0, dtype=float)
        check_covariance(self.P)
        self.predictor = RsuPredictor(self.x.copy(), self.P.copy(), t0)
        self.track = (self.x.copy(), self.P.copy())
        self.last_fix_cov = np.zeros((2, 2))
        self.gps_isolated = False
        self.benign_streak = 0
        self.cusum_g = 0.0
        width = forest.window if forest is not None else cfg.window
        self.window = FeatureWindow(width)
        self.epoch_log: list[EpochRecord] = []
        self.anchor_log: list[RsuAnchorEvent] = []
        self.fused_while_isolated = 0
        self._clock = (t0, -1)
        # recent (imu sample, ekf x, ekf P, predictor, track) after each sample
        self._history: deque = deque(maxlen=64)
        self._history.append((None, self.x.copy(), self.P.copy(), self.predictor, self.track))

    # ------------------------------------------------------------ events

    @property
    def estimate(self) -> VehicleState:
        return VehicleState.from_array(self.x)

    def step(self, event, truth=None) -> "DefensePipeline":
        key = (round(event.t, 9), _PRIORITY[type(event)])
        if key < self._clock:
            raise PipelineError(f"out-of-order event at t={event.t} after t={self._clock[0]}")
        self._clock = key
        if isinstance(event, ImuSample):
            self._on_imu(event)
        elif isinstance(event, GpsFix):
            self._on_gps(event, truth)
        elif isinstance(event, RsuFix):
            self._on_rsu_fix(event)
        elif isinstance(event, RangeBatch):
            self._on_ranges(event)
        else:
            raise PipelineError(f"unsupported event {type(event).__name__}")
        if self.cfg.debug:
            check_covariance(self.P, "P_hat")
            check_covariance(self.predictor.P, "P_rsu")
        return self

    def _on_imu(self, u: ImuSample) -> None:
        self.x, self.P = predict_arrays(self.x, self.P, u, self.ekf_cfg)
        self.predictor = predictor_step(self.predictor, u, self.ekf_cfg)
        self.track = predict_arrays(*self.track, u, self.ekf_cfg)
        self._history.append((u, self.x.copy(), self.P.copy(), self.predictor, self.track))

    def _lookup(self, t: float):
        for entry in reversed(self._history):
            u = entry[0]
            t_entry = u.t if u is not None else None
            if t_entry is None or t_entry <= t + 1e-9:
                return entry
        return self._history[0]

    def _replay(self, t: float):
        return [e[0] for e in self._history if e[0] is not None and e[0].t > t + 1e-9]

    def _anchor_velocity(self, fix: RsuFix, ekf_x: np.ndarray, ekf_P: np.ndarray, track):
        cfg = self.cfg
        if cfg.anchor_source == "rsu_track":
            tx, tP, _ = update_arrays(*track, np.asarray(fix.position), self._rsu_cfg(fix))
            return tx, tP, (tx[2], tx[3], tP[2, 2], tP[3, 3])
        if cfg.anchor_source == "ekf":
            return None, None, (ekf_x[2], ekf_x[3], ekf_P[2, 2], ekf_P[3, 3])
        return None, None, (ekf_x[2], ekf_x[3], cfg.anchor_heading_var, cfg.anchor_speed_var)

    def _rsu_cfg(self, fix: RsuFix) -> EkfConfig:
        return EkfConfig(self.ekf_cfg.dt, self.ekf_cfg.Q, np.asarray(fix.covariance), self.ekf_cfg.H)

    def _on_rsu_fix(self, fix: RsuFix) -> None:
        cfg = self.cfg
        _, ekf_x, ekf_P, _, track = self._lookup(fix.t_emitted)
        tx, tP, (h, v, hv, sv) = self._anchor_velocity(fix, ekf_x, ekf_P, track)
        pred = predictor_anchor(fix, h, v, heading_var=hv, speed_var=sv)
        replay = self._replay(fix.t_emitted) if cfg.latency_compensation else []
        for u in replay:
            pred = predictor_step(pred, u, self.ekf_cfg)
        if tx is not None:
            # the track always catches up, it is never served stale
            for u in self._replay(fix.t_emitted):
                tx, tP = predict_arrays(tx, tP, u, self.ekf_cfg)
            self.track = (tx, tP)
        self.predictor = pred
        self.last_fix_cov = fix.covariance
        if cfg.corrects:
            self.x = pred.x.copy()
            self.P = pred.P.copy()
        self.anchor_log.append(RsuAnchorEvent(fix.t_available, pred.x.copy(), pred.P.copy(),
                                              self.x.copy(), self.P.copy(), cfg.corrects))

    def _on_ranges(self, batch: RangeBatch) -> None:
        _, _, _, prior, _ = self._lookup(batch.t_emitted)
        odometry = [e[0] for e in self._history if e[0] is not None]
        try:
            fix = localize_G(batch.ranges, batch.site, odometry, prior.state,
                             sigma_rsu=self.cfg.sigma_rsu, dt=self.ekf_cfg.dt,
                             latency=batch.t_available - batch.t_emitted)
        except (NoFixError, RsuError) as exc:
            log.debug("no RSU fix at t=%.2f: %s", batch.t_emitted, exc)
            return
        if fix_std(fix) > self.cfg.max_fix_std:
            return
        self._on_rsu_fix(fix)

    def _verdicts(self, nees: float, window: np.ndarray):
        cfg = self.cfg
        v_chi2 = chi2_verdict(nees, 2, cfg.chi2_confidence)
        self.cusum_g, v_cusum = cusum_step(self.cusum_g, nees, cfg.cusum_drift, cfg.cusum_threshold)
        v_if = None
        if self.forest is not None:
            v_if = vote(self.forest, window) if self.forest.window_mode == "vote" else score(self.forest, window)
        return {IFOREST: v_if, CHI2: v_chi2, CUSUM: v_cusum}

    def _on_gps(self, fix: GpsFix, truth) -> None:
        cfg = self.cfg
        z = np.array([fix.px, fix.py])
        innovation = z - self.ekf_cfg.H @ self.x
        nees = compute_nees(innovation, self.P, self.ekf_cfg)
        r_rsu, s_rsu = compute_rsu_features(z, self.predictor.x, self.predictor.P,
                                            self.last_fix_cov, self.ekf_cfg)
        fv = FeatureVector(fix.t, nees, r_rsu, s_rsu)
        window = self.window.push(fv)
        verdicts = self._verdicts(nees, window)

        fuse = True
        if cfg.gating:
            delta = verdicts[cfg.detector].delta
            if self.gps_isolated:
                reinstate, self.benign_streak = reinstate_policy(self.benign_streak, delta,
                                                                 cfg.reinstate_after)
                if reinstate:
                    self.gps_isolated = False
                    self.benign_streak = 0
                else:
                    fuse = False
            elif delta == 1:
                fuse = False
                self.gps_isolated = True
                self.benign_streak = 0
                if cfg.corrects:
                    self.x = self.predictor.x.copy()
                    self.P = self.predictor.P.copy()
        if fuse:
            self.x, self.P, _ = update_arrays(self.x, self.P, z, self.ekf_cfg)

        tx, ty = (float(truth[0]), float(truth[1])) if truth is not None else (np.nan, np.nan)
        v_if = verdicts[IFOREST]
        self.epoch_log.append(EpochRecord(
            t=fix.t, nees=nees, r_rsu=r_rsu, s_rsu=s_rsu,
            verdict_iforest=v_if.delta if v_if is not None else 0,
            verdict_chi2=verdicts[CHI2].delta, verdict_cusum=verdicts[CUSUM].delta,
            est_x=float(self.x[0]), est_y=float(self.x[1]), true_x=tx, true_y=ty,
            spoofed=fix.spoofed, isolated=self.gps_isolated, fused=fuse,
            since_anchor=fix.t - self.predictor.anchored_at,
            score_iforest=v_if.score if v_if is not None else 0.0,
        ))


# ---------------------------------------------------------------- epoch log I/O


def features_of(records: list[EpochRecord]) -> np.ndarray:
    return np.array([[r.nees, r.r_rsu, r.s_rsu] for r in records]).reshape(-1, 3)


def write_epoch_log(path, records: list[EpochRecord], fmt: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    with path.open("w", newline="", encoding="utf-8") as fh:
        if fmt == "jsonl":
            for r in records:
                row = {k: getattr(r, k) for k in EPOCH_COLUMNS}
                fh.write(json.dumps(row) + "\n")
            return
        w = csv.writer(fh)
        w.writerow(EPOCH_COLUMNS)
        for r in records:
            row = []
            for k in EPOCH_COLUMNS:
                v = getattr(r, k)
                row.append(int(v) if isinstance(v, bool) else (repr(v) if isinstance(v, float) else v))
            w.writerow(row)


def read_epoch_log(path) -> list[EpochRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochRecord(
                t=float(row["t"]), nees=float(row["nees"]), r_rsu=float(row["r_rsu"]),
                s_rsu=float(row["s_rsu"]), verdict_iforest=int(row["verdict_iforest"]),
                verdict_chi2=int(row["verdict_chi2"]), verdict_cusum=int(row["verdict_cusum"]),
                est_x=float(row["est_x"]), est_y=float(row["est_y"]),
                true_x=float(row["true_x"]), true_y=float(row["true_y"]),
                spoofed=bool(int(row["spoofed"])), isolated=bool(int(row["isolated"])),
            ))
    return out
