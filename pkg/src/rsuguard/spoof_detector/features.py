"""Per-epoch detector features: NEES of the GPS innovation and RSU-protected residuals."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..state_estimation import EkfConfig, EstimationError

N_FEATURES = 3


@dataclass(frozen=True, slots=True)
class FeatureVector:
    t: float
    nees: float
    r_rsu: float
    s_rsu: float

    def __post_init__(self) -> None:
        vals = (self.nees, self.r_rsu, self.s_rsu)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite features: {self}")
        if self.nees < 0 or self.r_rsu < 0 or self.s_rsu < 0:
            raise ValueError(f"feature sign violated: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.nees, self.r_rsu, self.s_rsu])


def compute_nees(innovation, P: np.ndarray, cfg: EkfConfig) -> float:
    """``r^T S^-1 r`` with ``S = H P H^T + R_gps``; ``P`` is the pre-update covariance."""
    r = np.asarray(innovation, dtype=float)
    S = cfg.H @ P @ cfg.H.T + cfg.R_gps
    try:
        val = float(r @ np.linalg.solve(S, r))
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular innovation covariance") from exc
    return max(val, 0.0)


def compute_rsu_features(z_gps, x_rsu, P_rsu: np.ndarray, R_rsu: np.ndarray,
                         cfg: EkfConfig) -> tuple[float, float]:
    """Distance from the GPS fix to the RSU-based prediction and det of its covariance.

    Only the tested fix enters; the prediction comes from the GPS-free chain.
    """
    r = np.asarray(z_gps, dtype=float) - cfg.H @ np.asarray(x_rsu, dtype=float)
    S = cfg.H @ P_rsu @ cfg.H.T + R_rsu
    return float(np.hypot(r[0], r[1])), float(max(np.linalg.det(S), 0.0))


class FeatureWindow:
    """Sliding window of the last ``width`` feature vectors.

    Until ``width`` epochs have been seen the window is padded by repeating the
    earliest vector.
    """

    def __init__(self, width: int = 3):
        if width < 1:
            raise ValueError("window width must be >= 1")
        self.width = width
        self._buf: deque[np.ndarray] = deque(maxlen=width)

    def push(self, fv: FeatureVector) -> np.ndarray:
        self._buf.append(fv.as_array())
        return self.current()

    def current(self) -> np.ndarray:
        if not self._buf:
            raise ValueError("empty feature window")
        pad = [self._buf[0]] * (self.width - len(self._buf))
        return np.concatenate(pad + list(self._buf))


def windowed(features: np.ndarray, width: int = 3) -> np.ndarray:
    """Rows ``[A_{k-W+1}, ..., A_k]`` for every k of one trip, padded at the start."""
    features = np.asarray(features, dtype=float).reshape(-1, N_FEATURES)
    if len(features) == 0:
        return np.empty((0, N_FEATURES * width))
    padded = np.vstack([np.repeat(features[:1], width - 1, axis=0), features])
    return np.hstack([padded[i:i + len(features)] for i in range(width)])
