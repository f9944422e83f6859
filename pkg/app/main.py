from builtins import OSError, int, len, str
from functools import wraps
from pathlib import Path
from typing import List, Optional
import logging
import sys

import click
import numpy as np
from pydantic import ValidationError

from app.dependencies import get_executor, get_settings
from app.models.network_model import build_network
from app.schemas.config_schemas import EstimatorMode, RankEstimatorConfig, StabilizationConfig, TrainConfig
from app.schemas.plan_schema import FactorizationPlan
from app.schemas.report_schema import TrainReport
from app.services.dataset_service import load_dataset
from app.services.profiler_service import ProfilerConfig, default_stacks, profile
from app.services.snapshot_service import (analyze_snapshots, factorize_snapshot, network_tensors,
                                           read_snapshot, write_analysis, write_snapshot)
from app.services.trainer_service import cuttlefish_train_with_trajectories, train_full_rank
from app.services.trajectory_service import export_csv
from app.utils.common import setup_logging
from app.utils.exceptions import ConfigError, DivergenceError, LowRankError, OutputError

logger = logging.getLogger(__name__)


def handle_errors(command):
    """Turn package errors into a one-line diagnostic with exit code 1."""
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except LowRankError as e:
            logger.debug("Command failed", exc_info=True)
            raise click.ClickException(f"{type(e).__name__}: {e}") from e
    return wrapper


def load_train_config(path: str, seed: Optional[int] = None) -> TrainConfig:
    """Read a TrainConfig JSON file; seed precedence is flag, then CF_SEED, then the file."""
    try:
        config = TrainConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e.error_count()} errors, first: {e.errors()[0]['msg']}") from e
    env_seed = get_settings().cf_seed
    if seed is not None:
        config.seed = seed
    elif env_seed is not None:
        config.seed = env_seed
    return config


def _make_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Could not create {path}: {e}")
        raise OutputError(f"Cannot create output directory {path}: {e}") from e
    return path


def _write_text(path: Path, content: str) -> Path:
    try:
        path.write_text(content, encoding="utf-8")
    except OSError as e:
        logger.error(f"Could not write {path}: {e}")
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")
    return path


@click.group()
def cli():
    """Automated low-rank training."""
    setup_logging()


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="TrainConfig JSON file")
@click.option("--data", required=True, help="Builtin dataset name or IDX location")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--seed", type=int, default=None, help="Overrides CF_SEED and the config seed")
@click.option("--full-rank-control", is_flag=True, help="Also train the full-rank baseline")
@handle_errors
def train(config_path, data, out_dir, seed, full_rank_control):
    """Train with automatic switch to low rank."""
    config = load_train_config(config_path, seed)
    dataset = load_dataset(data, seed=config.seed)
    out = _make_dir(Path(out_dir))
    executor = get_executor()
    try:
        model, report, trajectories = cuttlefish_train_with_trajectories(
            None, dataset, config, snapshot_dir=out / "snapshots", executor=executor)
    except DivergenceError as e:
        if e.partial_report is not None:
            _write_text(out / "report.json", e.partial_report.to_json())
        raise
    finally:
        if executor is not None:
            executor.shutdown()
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "timings.json", report.timings_json())
    export_csv(trajectories, out / "trajectories.csv")
    _write_text(out / "plan.json", report.plan.to_json() if report.plan is not None else "null")
    write_snapshot(out / "final.cfsnap", config.total_epochs, network_tensors(model))
    if full_rank_control:
        _, control = train_full_rank(None, dataset, config)
        _write_text(out / "control_report.json", control.to_json())
        click.echo(f"full-rank control accuracy {control.final_accuracy:.4f}")
    click.echo(f"switch epoch {report.switch_epoch}, K={report.K}, accuracy {report.final_accuracy:.4f}, "
               f"parameters {report.params_before} -> {report.params_after}")


@cli.command()
@click.option("--snapshots", "snapshot_dir", required=True, type=click.Path(file_okay=False), help="Directory of epoch_XXXX.cfsnap files")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--estimator", type=click.Choice([mode.value for mode in EstimatorMode]), default=EstimatorMode.SCALED_STABLE.value)
@click.option("--p", "p", type=float, default=0.8, help="Accumulative fraction for max_rule")
@click.option("--epsilon", type=float, default=0.1)
@click.option("--window", type=int, default=3)
@click.option("--min-epochs", type=int, default=5)
@click.option("--K", "K", type=int, default=1, help="Length of the full-rank layer prefix")
@handle_errors
def analyze(snapshot_dir, out_dir, estimator, p, epsilon, window, min_epochs, K):
    """Recompute rank trajectories and the plan from snapshots."""
    try:
        estimator_config = RankEstimatorConfig(mode=estimator, p=p)
        stabilization = StabilizationConfig(epsilon=epsilon, window=window, min_epochs=min_epochs)
    except ValidationError as e:
        raise ConfigError(f"Invalid analysis options: {e.errors()[0]['msg']}") from e
    result = analyze_snapshots(snapshot_dir, estimator_config, stabilization, K)
    write_analysis(result, out_dir)
    if result.plan is None:
        click.echo("stable ranks have not converged (not enough data), no plan written")
    else:
        click.echo(f"switch epoch {result.switch_epoch}, {len(result.plan.factorized_layers)} layers factorized")


@cli.command("profile")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False))
@handle_errors
def profile_command(config_path, out_file):
    """Time layer stacks and choose the full-rank prefix length."""
    config = load_train_config(config_path)
    model = build_network(config.model, np.random.default_rng(config.seed))
    result = profile(model, default_stacks(model, config.batch_size), ProfilerConfig.from_settings(config.profiler))
    _write_text(Path(out_file), result.to_json())
    click.echo(f"K_hat={result.K_hat}")


@cli.command()
@click.option("--snapshot", "snapshot_file", required=True, type=click.Path(dir_okay=False))
@click.option("--plan", "plan_file", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_file", required=True, type=click.Path(dir_okay=False))
@handle_errors
def factorize(snapshot_file, plan_file, out_file):
    """Apply a factorization plan to one snapshot."""
    try:
        plan = FactorizationPlan.model_validate_json(Path(plan_file).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigError(f"Cannot load plan {plan_file}: {e}") from e
    epoch, tensors = read_snapshot(snapshot_file)
    write_snapshot(out_file, epoch, factorize_snapshot(tensors, plan))
    click.echo(f"wrote {out_file}")


def format_report(report: TrainReport) -> List[str]:
    header = f"{'layer':<12} {'kind':<6} {'shape':<18} {'rank':>6} {'ratio':>7} {'params':>10} {'after':>10}"
    lines = [header, "-" * len(header)]
    for layer in report.layers:
        rank = "full" if layer.rank is None else str(layer.rank)
        ratio = "-" if layer.rank_ratio is None else f"{layer.rank_ratio:.3f}"
        shape = "x".join(str(d) for d in layer.shape)
        lines.append(f"{layer.layer:<12} {layer.kind:<6} {shape:<18} {rank:>6} {ratio:>7} "
                     f"{layer.params_before:>10} {layer.params_after:>10}")
    accuracy = "-" if report.final_accuracy is None else f"{report.final_accuracy:.4f}"
    lines.append("")
    lines.append(f"switch epoch: {report.switch_epoch} ({report.switch_source})")
    lines.append(f"K: {report.K}")
    lines.append(f"final accuracy: {accuracy}")
    lines.append(f"parameters: {report.params_before} -> {report.params_after}")
    return lines


@cli.command()
@click.option("--in", "in_dir", required=True, type=click.Path(file_okay=False))
@handle_errors
def report(in_dir):
    """Print the parameter and accuracy summary of a training run."""
    path = Path(in_dir) / "report.json"
    try:
        train_report = TrainReport.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigError(f"Cannot load report {path}: {e}") from e
    for line in format_report(train_report):
        click.echo(line)


def run(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on a module error, 2 on flag misuse."""
    try:
        cli.main(args=argv, prog_name="lowrank-trainer", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
