"""Command-line entry point: ``rsuguard <command> --config scenario.toml ...``.

Exit codes: 0 success, 1 configuration error, 2 run failure.
"""

from __future__ import annotations

import ast
import logging
import sys
from pathlib import Path

import click

from .eval_harness import ConfigError, load_config, run_batch, run_sweep, train_forest, tune_cusum, write_report
from .eval_harness.runner import evaluation_trajectories, format_table, resolve_forest
from .eval_harness.trajgen import synthetic_fleet
from .sensor_sim import TrajectoryError, save_trajectory
from .spoof_detector import ForestError

EXIT_CONFIG, EXIT_RUN = 1, 2


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _load(config: str, sets, **flags):
    overrides = _overrides(sets)
    for key, value in flags.items():
        if value is not None:
            overrides[key] = value
    return load_config(config, overrides)


def _emit(paths) -> None:
    for p in paths:
        click.echo(str(p))


config_option = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                             help="Scenario TOML file.")
set_option = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE",
                          help="Override one config value (repeatable).")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """GPS spoofing detection and RSU-based correction for connected vehicles."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@set_option
@click.option("--trip", type=int, default=None, help="Index of a single trajectory to run.")
@click.option("--model", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default="out/simulate", show_default=True)
def simulate(config, sets, trip, model, out):
    """Run trips once and write per-epoch logs."""
    cfg = _load(config, sets, **{"detector.model": model, "harness.repetitions": 1})
    trajs = evaluation_trajectories(cfg)
    if trip is not None:
        if not 0 <= trip < len(trajs):
            raise ConfigError(f"--trip {trip} out of range (0..{len(trajs) - 1})")
        trajs = [trajs[trip]]
    report = run_batch(cfg, keep_epochs=True, trajectories=trajs)
    click.echo(format_table(report.means), err=True)
    _emit(write_report(report, out, cfg.detector.selected))
    _check_failures(report)


@cli.command()
@config_option
@set_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model file to write.")
def train(config, sets, out):
    """Fit the isolation forest on benign trips."""
    cfg = _load(config, sets)
    forest = train_forest(cfg)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    forest.save(out)
    _emit([out])


@cli.command()
@config_option
@set_option
@click.option("--model", type=click.Path(dir_okay=False), default=None,
              help="Trained model; trained on the fly when omitted.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--epochs/--no-epochs", default=True, show_default=True, help="Write per-epoch logs.")
def evaluate(config, sets, model, out, epochs):
    """Batch evaluation over all trips and repetitions."""
    cfg = _load(config, sets, **{"detector.model": model})
    report = run_batch(cfg, keep_epochs=epochs)
    click.echo(format_table(report.means), err=True)
    _emit(write_report(report, out, cfg.detector.selected))
    _check_failures(report)


@cli.command()
@config_option
@set_option
@click.option("--axis", required=True, type=click.Choice(["D_RSU", "alpha", "sigma_rsu"]))
@click.option("--values", required=True, help="Comma-separated axis values.")
@click.option("--model", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default="out/sweep", show_default=True)
def sweep(config, sets, axis, values, model, out):
    """Repeat the batch for each value of one parameter."""
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be numbers, got {values!r}") from None
    cfg = _load(config, sets, **{"detector.model": model})
    # without a model file each value trains on its own benign trips
    forest = resolve_forest(cfg, None) if cfg.detector.model else None
    table = run_sweep(cfg, axis, vals, forest=forest)
    path = Path(out) / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.to_csv())
    for v, rep in table.reports.items():
        click.echo(f"{axis} = {v:g}\n{format_table(rep.means)}", err=True)
    _emit([path])


@cli.command("tune-cusum")
@config_option
@set_option
def tune_cusum_cmd(config, sets):
    """Grid-search the CUSUM drift and threshold for the best mean F1."""
    cfg = _load(config, sets)
    (drift, threshold), grid = tune_cusum(cfg)
    for g in grid:
        click.echo(f"drift={g['drift']:g} threshold={g['threshold']:g} f1={g['f1']:.3f}", err=True)
    click.echo(f"cusum_drift = {drift:g}\ncusum_threshold = {threshold:g}")


@cli.command("gen-trajectories")
@click.option("--count", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--min-duration", type=float, default=60.0, show_default=True)
@click.option("--max-duration", type=float, default=300.0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen_trajectories(count, seed, min_duration, max_duration, out):
    """Write synthetic ground-truth trips as CSV files."""
    if count < 1 or min_duration > max_duration:
        raise ConfigError("need count >= 1 and min-duration <= max-duration")
    paths = []
    for name, traj in synthetic_fleet(count, seed, min_duration, max_duration):
        p = Path(out) / f"{name}.csv"
        save_trajectory(p, traj)
        paths.append(p)
    _emit(paths)


def _check_failures(report) -> None:
    if report.failures:
        raise RuntimeError(f"{len(report.failures)} trip(s) failed; see report.txt")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="rsuguard", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUN
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except (ConfigError, ForestError, TrajectoryError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a run failure
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        click.echo(f"run failed: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUN
    return 0


if __name__ == "__main__":
    sys.exit(main())
