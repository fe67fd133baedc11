"""GPS spoofing models: constant bias and exponentially growing (stealthy) offsets."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .state_estimation import GpsFix

# Attack durations are drawn from U(5, 35) s.
MIN_DURATION = 5.0
MAX_DURATION = 35.0


class AttackKind(str, enum.Enum):
    NONE = "none"
    CONSTANT_BIAS = "constant_bias"
    STEALTHY = "stealthy"


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSchedule:
    """Attack window in seconds plus model parameters.

    ``bias`` and ``direction`` are world-frame vectors unless ``onset_heading`` is
    set, in which case they are (lateral, longitudinal) road-frame components,
    lateral pointing left of travel, rotated once using the heading at onset.
    """

    kind: AttackKind = AttackKind.NONE
    t_s: float = 0.0
    t_e: float = 0.0
    bias: tuple[float, float] = (4.0, 0.0)
    m: float = 1.0
    n: float = 1.07
    direction: tuple[float, float] = (1.0, 0.0)
    onset_heading: float | None = None
    gps_period: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "bias", tuple(float(v) for v in self.bias))
        object.__setattr__(self, "direction", tuple(float(v) for v in self.direction))
        if self.kind is AttackKind.NONE:
            return
        if not self.t_s < self.t_e:
            raise AttackError("attack window needs t_s < t_e")
        if self.kind is AttackKind.STEALTHY:
            if not self.m > 0:
                raise AttackError("stealthy attack needs m > 0")
            if not self.n > 1:
                raise AttackError("stealthy attack needs n > 1")
            if not math.isclose(math.hypot(*self.direction), 1.0, rel_tol=1e-9):
                raise AttackError("stealthy direction must be a unit vector")

    def _to_world(self, v: tuple[float, float]) -> np.ndarray:
        if self.onset_heading is None:
            return np.array(v)
        h = self.onset_heading
        lateral = np.array([-math.sin(h), math.cos(h)])
        longitudinal = np.array([math.cos(h), math.sin(h)])
        return v[0] * lateral + v[1] * longitudinal

    def active(self, t: float) -> bool:
        return self.kind is not AttackKind.NONE and self.t_s <= t <= self.t_e

    def epoch_index(self, t: float) -> int:
        """Number of GPS epochs in [t_s, t); 0 at the first attacked fix."""
        return int(math.floor((t - self.t_s) / self.gps_period + 1e-9))

    def offset(self, t: float) -> np.ndarray:
        if not self.active(t):
            return np.zeros(2)
        if self.kind is AttackKind.CONSTANT_BIAS:
            return self._to_world(self.bias)
        c = self.m * self.n ** self.epoch_index(t)
        return c * self._to_world(self.direction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["bias"] = list(self.bias)
        d["direction"] = list(self.direction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSchedule":
        d = dict(d)
        d["bias"] = tuple(d.get("bias", (4.0, 0.0)))
        d["direction"] = tuple(d.get("direction", (1.0, 0.0)))
        return cls(**d)


NO_ATTACK = AttackSchedule()


def apply_attack(fix: GpsFix, sched: AttackSchedule) -> GpsFix:
    if not sched.active(fix.t):
        return replace(fix, spoofed=False)
    dx, dy = sched.offset(fix.t)
    return GpsFix(fix.t, fix.px + float(dx), fix.py + float(dy), spoofed=True)


def apply_attacks(fixes, sched: AttackSchedule) -> list[GpsFix]:
    return [apply_attack(f, sched) for f in fixes]


def random_schedule(rng: np.random.Generator, kind: AttackKind | str, trip_duration: float,
                    *, t0: float = 0.0, **params) -> AttackSchedule:
    """Uniform duration in [5, 35] s and uniform start so the window fits the trip.

    ``params`` overrides model defaults (bias, m, n, direction, onset_heading).
    """
    kind = AttackKind(kind)
    if not trip_duration > MAX_DURATION + MIN_DURATION:
        raise AttackError(f"trip of {trip_duration:.1f} s is too short for a random attack")
    duration = rng.uniform(MIN_DURATION, MAX_DURATION)
    t_s = t0 + rng.uniform(0.0, trip_duration - duration)
    if kind is AttackKind.NONE:
        return AttackSchedule(**params)
    return AttackSchedule(kind=kind, t_s=float(t_s), t_e=float(t_s + duration), **params)
