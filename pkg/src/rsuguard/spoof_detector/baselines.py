"""Benchmark detectors on the NEES statistic: chi-square test and CUSUM."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from scipy.special import chdtr
from scipy.stats import chi2

IFOREST = "iforest"
CHI2 = "chi2"
CUSUM = "cusum"
DETECTORS = (IFOREST, CHI2, CUSUM)


@dataclass(frozen=True, slots=True)
class DetectorVerdict:
    """``delta`` is +1 for "under attack" and -1 for benign."""

    delta: int
    score: float
    detector_id: str

    @property
    def attack(self) -> bool:
        return self.delta == 1


@lru_cache(maxsize=64)
def chi2_threshold(dof: int = 2, confidence: float = 0.95) -> float:
    return float(chi2.ppf(confidence, dof))


def chi2_verdict(nees: float, dof: int = 2, confidence: float = 0.95) -> DetectorVerdict:
    if nees < 0:
        raise ValueError("NEES must be non-negative")
    thr = chi2_threshold(dof, confidence)
    return DetectorVerdict(1 if nees > thr else -1, float(chdtr(dof, nees)), CHI2)


def cusum_step(g: float, nees: float, drift: float = 3.0,
               threshold: float = 10.0) -> tuple[float, DetectorVerdict]:
    """One-sided CUSUM on NEES; the statistic restarts from zero after an alarm."""
    if g < 0:
        raise ValueError("CUSUM statistic must be non-negative")
    g_new = max(0.0, g + nees - drift)
    score = g_new / (g_new + threshold) if g_new + threshold > 0 else 1.0
    if g_new > threshold:
        return 0.0, DetectorVerdict(1, score, CUSUM)
    return g_new, DetectorVerdict(-1, score, CUSUM)
