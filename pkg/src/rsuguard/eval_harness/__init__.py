"""Scenario configuration, batch evaluation, metrics and sweeps."""

from .config import ConfigError, ScenarioConfig, default_config, from_dict, load_config
from .metrics import (
    Confusion,
    TripMetrics,
    compute_confusion,
    compute_f1,
    compute_rmse,
    precision_recall,
    trip_metrics,
)
from .runner import (
    BatchReport,
    SweepTable,
    build_streams,
    run_batch,
    run_pipeline,
    run_sweep,
    run_trip,
    train_forest,
    tune_cusum,
    write_report,
)

__all__ = [
    "ConfigError", "ScenarioConfig", "default_config", "from_dict", "load_config", "Confusion",
    "TripMetrics", "compute_confusion", "compute_f1", "compute_rmse", "precision_recall",
    "trip_metrics", "BatchReport", "SweepTable", "build_streams", "run_batch", "run_pipeline",
    "run_sweep", "run_trip", "train_forest", "tune_cusum", "write_report",
]
