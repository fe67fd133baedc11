"""Scenario configuration: one TOML file with a section per subsystem.

Every key has a default, so an empty file describes the reference scenario.
The file is validated against ``config_schema.json`` before use.
"""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..attack_engine import AttackKind
from ..spoof_detector import DETECTORS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectorySection:
    paths: tuple[str, ...] = ()
    synthetic_count: int = 20
    synthetic_seed: int = 1
    min_duration: float = 60.0
    max_duration: float = 300.0


@dataclass(frozen=True)
class TrainingSection:
    synthetic_count: int = 20
    synthetic_seed: int = 1001
    repetitions: int = 1
    seed: int = 7


@dataclass(frozen=True)
class SensorSection:
    gps_sigma: float = 1.5
    imu_accel_sigma: float = 0.05
    imu_gyro_sigma: float = 0.005


@dataclass(frozen=True)
class EkfSection:
    dt: float = 0.1
    gps_period: float = 1.0
    # None: filter noise matches the sensor section
    q_accel_sigma: float | None = None
    q_gyro_sigma: float | None = None
    r_gps_sigma: float | None = None


@dataclass(frozen=True)
class RsuSection:
    spacing: float = 1500.0
    service_radius: float = 500.0
    sigma: float = 0.25
    broadcast_rate: float = 10.0
    sequence_length: int = 10
    latency_ms: float = 100.0
    lateral_offset: float = 0.0
    fix_model: str = "gaussian"
    max_fix_std: float = 1.0
    anchor_source: str = "rsu_track"
    anchor_heading_var: float = 0.05
    anchor_speed_var: float = 1.0
    latency_compensation: bool = True
    sites: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True)
class AttackSection:
    kind: str = "constant_bias"
    schedule: str = "random"
    t_s: float = 0.0
    t_e: float = 0.0
    bias: tuple[float, float] = (4.0, 0.0)
    m: float = 1.0
    n: float = 1.07
    direction: tuple[float, float] = (1.0, 0.0)
    frame: str = "road"


@dataclass(frozen=True)
class DetectorSection:
    selected: str = "iforest"
    compare: tuple[str, ...] = DETECTORS
    alpha: float = 0.2
    window: int = 3
    window_mode: str = "concat"
    feature_transform: str = "none"
    n_trees: int = 100
    psi: int = 256
    model: str | None = None
    chi2_confidence: float = 0.95
    cusum_drift: float = 3.0
    cusum_threshold: float = 10.0


@dataclass(frozen=True)
class PipelineSection:
    reinstate_after: int = 3
    rsu_correction: str = "auto"


@dataclass(frozen=True)
class HarnessSection:
    seed: int = 0
    repetitions: int = 5
    workers: int = 1


@dataclass(frozen=True)
class ScenarioConfig:
    trajectories: TrajectorySection = field(default_factory=TrajectorySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    ekf: EkfSection = field(default_factory=EkfSection)
    rsu: RsuSection = field(default_factory=RsuSection)
    attack: AttackSection = field(default_factory=AttackSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    harness: HarnessSection = field(default_factory=HarnessSection)
    base_dir: str = "."

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return _jsonable(d)

    def override(self, section: str, **values) -> "ScenarioConfig":
        """Copy with some keys of one section replaced (validated)."""
        d = self.to_dict()
        d[section].update(values)
        return from_dict(d, self.base_dir)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTION_TYPES = {
    "trajectories": TrajectorySection, "training": TrainingSection, "sensor": SensorSection,
    "ekf": EkfSection, "rsu": RsuSection, "attack": AttackSection, "detector": DetectorSection,
    "pipeline": PipelineSection, "harness": HarnessSection,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def schema() -> dict:
    return json.loads(resources.files("rsuguard.eval_harness").joinpath("config_schema.json").read_text())


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def from_dict(data: dict, base_dir: str | Path = ".") -> ScenarioConfig:
    data = copy.deepcopy(data)
    try:
        jsonschema.validate(data, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        values = {k: _tupleize(v) for k, v in data.get(name, {}).items()}
        sections[name] = cls(**values)
    cfg = ScenarioConfig(**sections, base_dir=str(base_dir))
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg: ScenarioConfig) -> None:
    t = cfg.trajectories
    if t.min_duration > t.max_duration:
        raise ConfigError("trajectories.min_duration exceeds max_duration")
    AttackKind(cfg.attack.kind)
    if cfg.attack.schedule == "fixed" and cfg.attack.kind != "none" and not cfg.attack.t_s < cfg.attack.t_e:
        raise ConfigError("attack.t_s must be earlier than attack.t_e")
    if cfg.detector.selected not in cfg.detector.compare:
        raise ConfigError("detector.selected must be one of detector.compare")
    step_ratio = cfg.ekf.gps_period / cfg.ekf.dt
    if abs(step_ratio - round(step_ratio)) > 1e-6:
        raise ConfigError("ekf.gps_period must be a multiple of ekf.dt")
    rate_ratio = 1.0 / (cfg.rsu.broadcast_rate * cfg.ekf.dt)
    if abs(rate_ratio - round(rate_ratio)) > 1e-6:
        raise ConfigError("rsu.broadcast_rate must divide the IMU rate")


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ScenarioConfig:
    """Read a TOML scenario file. ``overrides`` maps ``section.key`` to a value."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        data.setdefault(section, {})[key] = value
    cfg = from_dict(data, path.parent)
    for p in cfg.trajectories.paths:
        if not any(cfg.resolve(".").glob(p)) and not cfg.resolve(p).exists():
            raise ConfigError(f"trajectory file not found: {p}")
    if cfg.detector.model and not cfg.resolve(cfg.detector.model).exists():
        raise ConfigError(f"model file not found: {cfg.detector.model}")
    return cfg


def default_config() -> ScenarioConfig:
    return from_dict({})


def dump_toml(cfg: ScenarioConfig) -> str:
    """Minimal TOML writer for the flat section layout."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def replace_section(cfg: ScenarioConfig, section: str, **values) -> ScenarioConfig:
    return replace(cfg, **{section: replace(getattr(cfg, section), **values)})
