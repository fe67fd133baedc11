"""Trip simulation, batch evaluation, sensitivity sweeps and CUSUM tuning."""

from __future__ import annotations

import glob
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attack_engine import NO_ATTACK, AttackKind, AttackSchedule, apply_attacks, random_schedule
from ..defense_pipeline import DefensePipeline, EpochRecord, PipelineConfig, features_of, write_epoch_log
from ..rsu_infra import (
    RangeBatch,
    RsuSite,
    SecureChannel,
    gaussian_fix,
    place_rsus,
    sample_range,
    serving_site,
    site_array,
)
from ..sensor_sim import (
    SensorNoiseConfig,
    Trajectory,
    gps_epoch_indices,
    load_trajectory,
    substream,
    synthesize_gps,
    synthesize_imu,
)
from ..spoof_detector import IFOREST, IsolationForest, train_iforest, windowed
from ..state_estimation import EkfConfig, GpsFix, ImuSample
from .config import ConfigError, ScenarioConfig
from .metrics import TripMetrics, compute_rmse, confusion_from_log, trip_metrics
from .trajgen import synthetic_fleet

log = logging.getLogger(__name__)

METRIC_NAMES = ("f1", "precision", "recall", "detection_latency", "rmse")
SWEEP_AXES = {"D_RSU": ("rsu", "spacing"), "alpha": ("detector", "alpha"),
              "sigma_rsu": ("rsu", "sigma")}


class RunFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- configuration helpers


def ekf_config(cfg: ScenarioConfig) -> EkfConfig:
    s, e = cfg.sensor, cfg.ekf
    accel = e.q_accel_sigma if e.q_accel_sigma is not None else s.imu_accel_sigma
    gyro = e.q_gyro_sigma if e.q_gyro_sigma is not None else s.imu_gyro_sigma
    gps = e.r_gps_sigma if e.r_gps_sigma is not None else s.gps_sigma
    # a filter needs strictly positive noise even when the sensors are ideal
    return EkfConfig.from_sigmas(e.dt, max(accel, 1e-6), max(gyro, 1e-7), max(gps, 1e-3))


def pipeline_config(cfg: ScenarioConfig, detector: str, *, gating: bool = True,
                    debug: bool = False) -> PipelineConfig:
    corr = {"auto": None, "on": True, "off": False}[cfg.pipeline.rsu_correction]
    d, r = cfg.detector, cfg.rsu
    return PipelineConfig(
        detector=detector, rsu_correction=corr, gating=gating,
        reinstate_after=cfg.pipeline.reinstate_after, chi2_confidence=d.chi2_confidence,
        cusum_drift=d.cusum_drift, cusum_threshold=d.cusum_threshold, window=d.window,
        anchor_source=r.anchor_source, anchor_heading_var=r.anchor_heading_var,
        anchor_speed_var=r.anchor_speed_var,
        latency_compensation=r.latency_compensation, sigma_rsu=r.sigma,
        max_fix_std=r.max_fix_std, debug=debug)


def evaluation_trajectories(cfg: ScenarioConfig) -> list[tuple[str, Trajectory]]:
    t = cfg.trajectories
    out = []
    for pattern in t.paths:
        matches = sorted(glob.glob(str(cfg.resolve(pattern)))) or [str(cfg.resolve(pattern))]
        for m in matches:
            out.append((Path(m).stem, load_trajectory(m, cfg.ekf.dt)))
    out += synthetic_fleet(t.synthetic_count, t.synthetic_seed, t.min_duration, t.max_duration, cfg.ekf.dt)
    if not out:
        raise ConfigError("no trajectories configured")
    return out


def training_trajectories(cfg: ScenarioConfig) -> list[tuple[str, Trajectory]]:
    t, tr = cfg.trajectories, cfg.training
    return synthetic_fleet(tr.synthetic_count, tr.synthetic_seed, t.min_duration, t.max_duration, cfg.ekf.dt)


# ---------------------------------------------------------------- streams


@dataclass
class TripStreams:
    traj: Trajectory
    schedule: AttackSchedule
    events: list
    sites: list[RsuSite]
    gps_truth: dict[float, tuple[float, float]]


def _schedule(cfg: ScenarioConfig, traj: Trajectory, rng: np.random.Generator) -> AttackSchedule:
    a = cfg.attack
    kind = AttackKind(a.kind)
    params = dict(bias=a.bias, m=a.m, n=a.n, direction=a.direction, gps_period=cfg.ekf.gps_period)
    if a.schedule == "random":
        sched = random_schedule(rng, kind, traj.duration, t0=float(traj.t[0]), **params)
    elif kind is AttackKind.NONE:
        sched = NO_ATTACK
    else:
        sched = AttackSchedule(kind=kind, t_s=a.t_s, t_e=a.t_e, **params)
    if sched.kind is not AttackKind.NONE and a.frame == "road":
        k = int(np.clip(np.searchsorted(traj.t, sched.t_s), 0, len(traj) - 1))
        sched = AttackSchedule(**{**sched.to_dict(), "bias": sched.bias, "direction": sched.direction,
                                  "onset_heading": float(traj.heading[k])})
    return sched


def build_streams(cfg: ScenarioConfig, traj: Trajectory, seed_path: tuple, *,
                  attack: bool = True) -> TripStreams:
    """Sensor, attack and RSU event streams for one trip, ordered by availability."""
    s = cfg.sensor
    noise = SensorNoiseConfig(s.gps_sigma, s.imu_accel_sigma, s.imu_gyro_sigma)
    seed = cfg.harness.seed
    imu = synthesize_imu(traj, noise, substream(seed, *seed_path, "imu"))
    gps = synthesize_gps(traj, noise, substream(seed, *seed_path, "gps"), period=cfg.ekf.gps_period)
    sched = _schedule(cfg, traj, substream(seed, *seed_path, "attack")) if attack else NO_ATTACK
    gps = apply_attacks(gps, sched)

    r = cfg.rsu
    if r.sites:
        sites = [RsuSite(tuple(c), r.service_radius, r.broadcast_rate) for c in r.sites]
    else:
        sites = place_rsus(traj, r.spacing, r.service_radius, lateral_offset=r.lateral_offset,
                           broadcast_rate=r.broadcast_rate)
    coords = site_array(sites)
    latency = r.latency_ms / 1000.0
    channel = SecureChannel(latency)
    rsu_rng = substream(seed, *seed_path, "rsu")
    rsu_events = []
    broadcast_stride = int(round(1.0 / (r.broadcast_rate * traj.dt)))
    for k in gps_epoch_indices(traj, cfg.ekf.gps_period):
        pos = (traj.px[k], traj.py[k])
        site_idx = serving_site(sites, coords, pos)
        if site_idx is None:
            continue
        t_k = float(traj.t[k])
        if r.fix_model == "gaussian":
            env = channel.send(gaussian_fix(pos, t_k, r.sigma, rsu_rng, latency))
            rsu_events.append(channel.receive(env, env.t_available))
            continue
        ranges = []
        for j in range(r.sequence_length, -1, -1):
            i = k - j * broadcast_stride
            if i < 0:
                continue
            rs = sample_range((traj.px[i], traj.py[i]), sites[site_idx], r.sigma, rsu_rng,
                              t=float(traj.t[i]), rsu_id=site_idx)
            if rs is not None:
                ranges.append(rs)
        if len(ranges) >= 3:
            rsu_events.append(RangeBatch(t_k, t_k + latency, sites[site_idx], tuple(ranges)))

    prio = {ImuSample: 0, GpsFix: 1}
    events = sorted(itertools.chain(imu, gps, rsu_events),
                    key=lambda e: (round(e.t, 9), prio.get(type(e), 2)))
    truth = {round(float(traj.t[k]), 9): (float(traj.px[k]), float(traj.py[k]))
             for k in gps_epoch_indices(traj, cfg.ekf.gps_period)}
    return TripStreams(traj, sched, events, sites, truth)


@dataclass
class PipelineRun:
    epochs: list[EpochRecord]
    estimates: np.ndarray
    pipeline: DefensePipeline


def run_pipeline(streams: TripStreams, cfg: ScenarioConfig, detector: str,
                 forest: IsolationForest | None, *, gating: bool = True, debug: bool = False) -> PipelineRun:
    traj = streams.traj
    pipe = DefensePipeline(ekf_config(cfg), pipeline_config(cfg, detector, gating=gating, debug=debug),
                           traj.state(0), float(traj.t[0]), forest)
    estimates = np.empty((len(traj), 2))
    estimates[0] = pipe.x[:2]
    k = 0
    truth = streams.gps_truth
    for ev in streams.events:
        if isinstance(ev, ImuSample):
            # the previous tick is complete once the next IMU sample arrives
            estimates[k] = pipe.x[:2]
            k += 1
            pipe.step(ev)
        elif isinstance(ev, GpsFix):
            pipe.step(ev, truth.get(round(ev.t, 9)))
        else:
            pipe.step(ev)
    estimates[k] = pipe.x[:2]
    return PipelineRun(pipe.epoch_log, estimates, pipe)


# ---------------------------------------------------------------- training


def collect_training_features(cfg: ScenarioConfig) -> np.ndarray:
    """Windowed features from benign trips with fusion never gated."""
    rows = []
    for i, (name, traj) in enumerate(training_trajectories(cfg)):
        for rep in range(cfg.training.repetitions):
            streams = build_streams(cfg, traj, ("train", cfg.training.synthetic_seed, i, rep), attack=False)
            run = run_pipeline(streams, cfg, IFOREST, None, gating=False)
            feats = features_of(run.epochs)
            if cfg.detector.window_mode == "concat":
                rows.append(windowed(feats, cfg.detector.window))
            else:
                rows.append(feats)
    return np.vstack(rows)


def train_forest(cfg: ScenarioConfig, *, return_scores: bool = False):
    X = collect_training_features(cfg)
    d = cfg.detector
    psi = min(d.psi, len(X))
    return train_iforest(X, d.n_trees, psi, d.alpha, substream(cfg.training.seed, "forest"),
                         window=d.window, window_mode=d.window_mode, transform=d.feature_transform,
                         return_scores=return_scores)


# ---------------------------------------------------------------- trips and batches


@dataclass
class TripResult:
    trip: str
    repetition: int
    schedule: dict
    metrics: dict[str, TripMetrics] = field(default_factory=dict)
    epochs: dict[str, list[EpochRecord]] = field(default_factory=dict)
    error: str | None = None


def run_trip(cfg: ScenarioConfig, name: str, traj: Trajectory, index: int, rep: int,
             forest: IsolationForest | None, *, keep_epochs: bool = True,
             debug: bool = False) -> TripResult:
    streams = build_streams(cfg, traj, ("trip", index, rep))
    result = TripResult(name, rep, streams.schedule.to_dict())
    truth = traj.positions()
    for det in cfg.detector.compare:
        run = run_pipeline(streams, cfg, det, forest, debug=debug)
        if not run.epochs:
            raise RunFailure(f"{name}: trip has no GPS epochs")
        result.metrics[det] = trip_metrics(confusion_from_log(run.epochs, det),
                                           compute_rmse(run.estimates, truth))
        if keep_epochs:
            result.epochs[det] = run.epochs
    return result


def _trip_job(args):
    cfg, name, traj, index, rep, forest, keep = args
    try:
        return run_trip(cfg, name, traj, index, rep, forest, keep_epochs=keep)
    except Exception as exc:  # recorded per trip, excluded from the means
        log.exception("trip %s rep %d failed", name, rep)
        return TripResult(name, rep, {}, error=f"{type(exc).__name__}: {exc}")


@dataclass
class BatchReport:
    detectors: tuple[str, ...]
    trips: list[TripResult]
    means: dict[str, dict[str, float]]
    config: dict

    @property
    def failures(self) -> list[TripResult]:
        return [t for t in self.trips if t.error]

    def mean(self, detector: str, metric: str) -> float:
        return self.means[detector][metric]

    def to_dict(self) -> dict:
        return {
            "detectors": list(self.detectors),
            "means": self.means,
            "n_trips": len(self.trips),
            "n_failed": len(self.failures),
            "trips": [
                {"trip": t.trip, "repetition": t.repetition, "schedule": t.schedule, "error": t.error,
                 "metrics": {d: m.as_dict() for d, m in t.metrics.items()}}
                for t in self.trips
            ],
            "config": self.config,
        }


def aggregate(trips: list[TripResult], detectors) -> dict[str, dict[str, float]]:
    ok = [t for t in trips if not t.error]
    means = {}
    for det in detectors:
        vals = {m: [getattr(t.metrics[det], m) for t in ok] for m in METRIC_NAMES}
        means[det] = {m: (math.fsum(v) / len(v) if v else math.nan) for m, v in vals.items()}
    return means


def needs_forest(cfg: ScenarioConfig) -> bool:
    return IFOREST in cfg.detector.compare


def resolve_forest(cfg: ScenarioConfig, forest: IsolationForest | None) -> IsolationForest | None:
    if forest is not None or not needs_forest(cfg):
        return forest
    if cfg.detector.model:
        return IsolationForest.load(cfg.resolve(cfg.detector.model))
    return train_forest(cfg)


def run_batch(cfg: ScenarioConfig, forest: IsolationForest | None = None, *,
              keep_epochs: bool = False, trajectories=None) -> BatchReport:
    forest = resolve_forest(cfg, forest)
    trajs = trajectories if trajectories is not None else evaluation_trajectories(cfg)
    jobs = [(cfg, name, traj, i, rep, forest, keep_epochs)
            for i, (name, traj) in enumerate(trajs) for rep in range(cfg.harness.repetitions)]
    if cfg.harness.workers > 1:
        with ProcessPoolExecutor(cfg.harness.workers) as pool:
            trips = list(pool.map(_trip_job, jobs, chunksize=4))
    else:
        trips = [_trip_job(j) for j in jobs]
    detectors = tuple(cfg.detector.compare)
    return BatchReport(detectors, trips, aggregate(trips, detectors), cfg.to_dict())


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepTable:
    axis: str
    rows: list[dict]
    reports: dict[float, BatchReport]

    def value(self, axis_value: float, detector: str, metric: str) -> float:
        return self.reports[axis_value].mean(detector, metric)

    def to_csv(self) -> str:
        lines = ["axis,value,detector,metric,mean"]
        for r in self.rows:
            lines.append(f"{r['axis']},{r['value']!r},{r['detector']},{r['metric']},{r['mean']!r}")
        return "\n".join(lines) + "\n"


def run_sweep(cfg: ScenarioConfig, axis: str, values, *, forest: IsolationForest | None = None,
              trajectories=None) -> SweepTable:
    """One batch per axis value with shared base seeds; long-format table."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    section, key = SWEEP_AXES[axis]
    trajs = trajectories if trajectories is not None else evaluation_trajectories(cfg)

    base_forest, train_scores = None, None
    if axis == "alpha" and needs_forest(cfg) and not cfg.detector.model and forest is None:
        # alpha only moves the threshold: train the trees once
        base_forest, train_scores = train_forest(cfg, return_scores=True)

    rows, reports = [], {}
    for v in values:
        sub = cfg.override(section, **{key: v})
        f = forest
        if base_forest is not None:
            f = base_forest.with_alpha(float(v), train_scores)
        report = run_batch(sub, f, trajectories=trajs)
        reports[v] = report
        for det, metrics in report.means.items():
            for m, mean in metrics.items():
                rows.append({"axis": axis, "value": v, "detector": det, "metric": m, "mean": mean})
    return SweepTable(axis, rows, reports)


# ---------------------------------------------------------------- CUSUM tuning

CUSUM_DRIFTS = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
CUSUM_THRESHOLDS = (2.0, 5.0, 10.0, 20.0, 40.0)


def tune_cusum(cfg: ScenarioConfig, drifts=CUSUM_DRIFTS, thresholds=CUSUM_THRESHOLDS,
               trajectories=None) -> tuple[tuple[float, float], list[dict]]:
    """Grid search over (drift, threshold) maximising mean CUSUM F1."""
    base = cfg.override("detector", compare=["cusum"], selected="cusum")
    trajs = trajectories if trajectories is not None else evaluation_trajectories(base)
    grid = []
    for b, tau in itertools.product(drifts, thresholds):
        rep = run_batch(base.override("detector", cusum_drift=b, cusum_threshold=tau), None,
                        trajectories=trajs)
        grid.append({"drift": b, "threshold": tau, "f1": rep.mean("cusum", "f1")})
    best = max(grid, key=lambda g: (g["f1"], -g["drift"], -g["threshold"]))
    return (best["drift"], best["threshold"]), grid


# ---------------------------------------------------------------- reports


def format_table(means: dict[str, dict[str, float]]) -> str:
    dets = list(means)
    width = max(12, *(len(d) + 2 for d in dets))
    lines = ["metric".ljust(20) + "".join(d.rjust(width) for d in dets)]
    for m in METRIC_NAMES:
        lines.append(m.ljust(20) + "".join(f"{means[d][m]:{width}.3f}" for d in dets))
    return "\n".join(lines) + "\n"


def write_report(report: BatchReport, out_dir, selected: str | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.txt"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    text = format_table(report.means)
    if report.failures:
        text += f"\n{len(report.failures)} trip(s) failed:\n"
        text += "".join(f"  {t.trip} rep {t.repetition}: {t.error}\n" for t in report.failures)
    paths[1].write_text(text)
    for t in report.trips:
        for det, records in t.epochs.items():
            stem = f"{t.trip}_r{t.repetition}"
            name = f"{stem}.csv" if det == (selected or report.detectors[0]) else f"{stem}.{det}.csv"
            p = out / "epochs" / name
            write_epoch_log(p, records)
            paths.append(p)
    return paths
