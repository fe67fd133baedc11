import json
from pathlib import Path

import numpy as np
import pytest

from rsuguard.cli import main
from rsuguard.eval_harness import ConfigError, default_config, from_dict, load_config, run_batch, run_sweep, tune_cusum
from rsuguard.eval_harness.config import dump_toml
from rsuguard.eval_harness.runner import aggregate, evaluation_trajectories, run_trip, write_report
from rsuguard.eval_harness.trajgen import MAX_LATERAL_ACCEL, synthetic_fleet


class TestConfig:
    def test_empty_file_is_default(self, tmp_path):
        (tmp_path / "s.toml").write_text("")
        assert load_config(tmp_path / "s.toml").to_dict() == default_config().to_dict()

    def test_defaults(self):
        cfg = default_config()
        assert (cfg.rsu.spacing, cfg.rsu.service_radius, cfg.rsu.sigma) == (1500.0, 500.0, 0.25)
        assert (cfg.detector.alpha, cfg.detector.window, cfg.pipeline.reinstate_after) == (0.2, 3, 3)
        assert (cfg.detector.cusum_drift, cfg.detector.cusum_threshold) == (3.0, 10.0)

    def test_shipped_scenarios(self):
        root = Path(__file__).resolve().parents[1] / "scenarios"
        assert load_config(root / "reference.toml").to_dict() == default_config().to_dict()
        assert load_config(root / "stealthy.toml").attack.kind == "stealthy"

    def test_overrides(self, tmp_path):
        (tmp_path / "s.toml").write_text("[rsu]\nsigma = 0.5\n")
        cfg = load_config(tmp_path / "s.toml", {"detector.alpha": 0.3})
        assert (cfg.rsu.sigma, cfg.detector.alpha) == (0.5, 0.3)

    @pytest.mark.parametrize("data", [
        {"rsu": {"sigma": -1}},
        {"detector": {"selected": "ocsvm"}},
        {"attack": {"kind": "noise"}},
        {"bogus": {}},
        {"rsu": {"spacing": "far"}},
        {"detector": {"selected": "chi2", "compare": ["iforest"]}},
        {"attack": {"schedule": "fixed", "t_s": 5.0, "t_e": 1.0}},
        {"ekf": {"gps_period": 0.25}},
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            from_dict(data)

    def test_missing_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")
        (tmp_path / "s.toml").write_text('[detector]\nmodel = "missing.json"\n')
        with pytest.raises(ConfigError, match="model file"):
            load_config(tmp_path / "s.toml")

    def test_bad_toml(self, tmp_path):
        (tmp_path / "s.toml").write_text("[rsu\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "s.toml")

    def test_dump_round_trip(self, tmp_path):
        cfg = default_config().override("attack", kind="stealthy").override("rsu", sites=[[0, 0], [10, 5]])
        (tmp_path / "s.toml").write_text(dump_toml(cfg))
        assert load_config(tmp_path / "s.toml").to_dict() == cfg.to_dict()


class TestFleet:
    def test_deterministic_and_bounded(self):
        a = synthetic_fleet(4, 3, 60, 120)
        b = synthetic_fleet(4, 3, 60, 120)
        for (na, ta), (nb, tb) in zip(a, b):
            assert na == nb and (ta.px == tb.px).all()
            assert 60 <= ta.duration <= 120
            yaw = np.angle(np.exp(1j * np.diff(ta.heading))) / ta.dt
            assert np.max(np.abs(ta.speed[:-1] * yaw)) <= MAX_LATERAL_ACCEL + 1e-9
        assert [n.split("_")[0] for n, _ in a] == ["straight", "curved", "straight", "curved"]


class TestRunner:
    def test_single_trip_report_equals_trip(self, small_cfg, small_forest):
        cfg = small_cfg.override("trajectories", synthetic_count=1)
        report = run_batch(cfg, small_forest)
        (trip,) = report.trips
        for det in cfg.detector.compare:
            assert report.means[det] == trip.metrics[det].as_dict()

    def test_deterministic_report(self, small_cfg, small_forest):
        a = run_batch(small_cfg, small_forest).to_dict()
        b = run_batch(small_cfg, small_forest).to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_aggregation_order_independent(self, small_cfg, small_forest):
        report = run_batch(small_cfg, small_forest)
        assert aggregate(report.trips[::-1], report.detectors) == report.means

    def test_single_value_sweep_equals_batch(self, small_cfg, small_forest):
        cfg = small_cfg.override("detector", compare=["iforest", "chi2"])
        table = run_sweep(cfg, "sigma_rsu", [0.25], forest=small_forest)
        assert table.reports[0.25].means == run_batch(cfg, small_forest).means
        assert table.to_csv().startswith("axis,value,detector,metric,mean\n")

    def test_unknown_axis(self, small_cfg):
        with pytest.raises(ConfigError):
            run_sweep(small_cfg, "speed", [1.0])

    def test_trip_failure_recorded(self, small_cfg, small_forest):
        cfg = small_cfg.override("trajectories", synthetic_count=1, min_duration=30.0, max_duration=30.0)
        report = run_batch(cfg, small_forest)
        assert len(report.failures) == 1 and "too short" in report.failures[0].error

    def test_write_report(self, small_cfg, small_forest, tmp_path):
        cfg = small_cfg.override("trajectories", synthetic_count=1)
        report = run_batch(cfg, small_forest, keep_epochs=True)
        paths = write_report(report, tmp_path, "iforest")
        names = {p.name for p in paths}
        assert {"report.json", "report.txt", "straight_000_r0.csv", "straight_000_r0.chi2.csv"} <= names

    def test_tune_cusum_grid(self, small_cfg):
        cfg = small_cfg.override("trajectories", synthetic_count=1)
        (b, tau), grid = tune_cusum(cfg, drifts=(2.0, 3.0), thresholds=(5.0, 10.0))
        assert len(grid) == 4
        best = max(g["f1"] for g in grid)
        assert any(g["drift"] == b and g["threshold"] == tau and g["f1"] == best for g in grid)

    def test_trajectory_files(self, small_cfg, tmp_path, straight_trip):
        from rsuguard.sensor_sim import save_trajectory

        save_trajectory(tmp_path / "trips" / "a.csv", straight_trip)
        (tmp_path / "s.toml").write_text('[trajectories]\npaths = ["trips/*.csv"]\nsynthetic_count = 0\n')
        trajs = evaluation_trajectories(load_config(tmp_path / "s.toml"))
        assert [n for n, _ in trajs] == ["a"]

    def test_run_trip_metrics_in_range(self, small_cfg, small_forest):
        name, traj = synthetic_fleet(1, 5, 80, 80)[0]
        res = run_trip(small_cfg, name, traj, 0, 0, small_forest)
        for m in res.metrics.values():
            assert 0 <= m.f1 <= 1 and m.rmse >= 0


class TestCli:
    @pytest.fixture
    def scenario(self, tmp_path):
        p = tmp_path / "s.toml"
        p.write_text("[trajectories]\nsynthetic_count = 1\nmin_duration = 60.0\nmax_duration = 70.0\n"
                     "[training]\nsynthetic_count = 3\n[harness]\nrepetitions = 1\n")
        return p

    def test_train_then_evaluate(self, scenario, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert main(["train", "--config", str(scenario), "--out", str(model)]) == 0
        assert model.exists()
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", str(scenario), "--model", str(model), "--out", str(out)]) == 0
        printed = capsys.readouterr().out.split()
        assert str(out / "report.json") in printed
        assert json.loads((out / "report.json").read_text())["n_failed"] == 0

    def test_simulate_single_trip(self, scenario, tmp_path):
        out = tmp_path / "sim"
        code = main(["simulate", "--config", str(scenario), "--trip", "0", "--out", str(out),
                     "--set", "detector.compare=['chi2']", "--set", "detector.selected='chi2'"])
        assert code == 0
        assert (out / "epochs" / "straight_000_r0.csv").exists()

    def test_sweep(self, scenario, tmp_path):
        out = tmp_path / "sw"
        code = main(["sweep", "--config", str(scenario), "--axis", "alpha", "--values", "0.1,0.3",
                     "--out", str(out)])
        assert code == 0
        assert "alpha,0.1,iforest,f1," in (out / "sweep.csv").read_text()

    def test_gen_trajectories(self, tmp_path):
        assert main(["gen-trajectories", "--count", "2", "--out", str(tmp_path / "t")]) == 0
        assert sorted(p.name for p in (tmp_path / "t").iterdir()) == ["curved_001.csv", "straight_000.csv"]

    def test_config_error_exit(self, tmp_path):
        assert main(["evaluate", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == 1
        bad = tmp_path / "bad.toml"
        bad.write_text("[rsu]\nsigma = -2\n")
        assert main(["evaluate", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_usage_error_exit(self, scenario):
        assert main(["sweep", "--config", str(scenario), "--axis", "speed", "--values", "1"]) == 1

    def test_run_failure_exit(self, tmp_path):
        p = tmp_path / "short.toml"
        p.write_text("[trajectories]\nsynthetic_count = 1\nmin_duration = 30.0\nmax_duration = 30.0\n"
                     "[detector]\ncompare = ['chi2']\nselected = 'chi2'\n[harness]\nrepetitions = 1\n")
        assert main(["evaluate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
