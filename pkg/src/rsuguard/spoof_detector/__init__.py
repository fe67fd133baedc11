"""Spoofing detectors: isolation forest on RSU-protected features, chi-square and CUSUM baselines."""

from .baselines import (
    CHI2,
    CUSUM,
    DETECTORS,
    IFOREST,
    DetectorVerdict,
    chi2_threshold,
    chi2_verdict,
    cusum_step,
)
from .features import (
    N_FEATURES,
    FeatureVector,
    FeatureWindow,
    compute_nees,
    compute_rsu_features,
    windowed,
)
from .iforest import (
    ForestError,
    IsolationForest,
    IsolationTree,
    c_factor,
    contamination_threshold,
    score,
    train_iforest,
    vote,
)

__all__ = [
    "CHI2", "CUSUM", "DETECTORS", "IFOREST", "DetectorVerdict", "chi2_threshold",
    "chi2_verdict", "cusum_step", "N_FEATURES", "FeatureVector", "FeatureWindow",
    "compute_nees", "compute_rsu_features", "windowed", "ForestError", "IsolationForest",
    "IsolationTree", "c_factor", "contamination_threshold", "score", "train_iforest", "vote",
]
