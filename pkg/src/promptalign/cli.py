"""Command line: ``promptalign run | ablation | plot | gen-data``.

Exit status is 0 on success, 1 when a run fails and 2 for configuration
errors. Flag values override the config file, which overrides defaults.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, apply_overrides, default_config, dump_config, load_config
from .pipeline import TrainingDiverged

OUTPUT_ENV = "PROMPTALIGN_OUT"
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        _fail(EXIT_CONFIG, f"seeds: expected comma-separated integers, got {text!r}")
    if not seeds:
        _fail(EXIT_CONFIG, "seeds: at least one seed is required")
    return seeds


def _resolve(config_path, seed, seeds, out, dqfa, tiafa, vpg, tau, epochs) -> tuple[ExperimentConfig, Path]:
    try:
        cfg = load_config(config_path) if config_path else default_config()
        seed_list = _parse_seeds(seeds)
        if seed is not None:
            seed_list = [seed]
        cfg = apply_overrides(cfg, seeds=seed_list, output_dir=out, dqfa=dqfa, tiafa=tiafa, vpg=vpg,
                              tau=tau, epochs=epochs)
    except ConfigError as err:
        _fail(EXIT_CONFIG, str(err))
    root = Path(cfg.output_dir or os.environ.get(OUTPUT_ENV, "runs"))
    return cfg, root / cfg.name


def common_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML experiment config."),
        click.option("--seed", type=int, default=None, help="Run a single seed."),
        click.option("--seeds", default=None, help="Comma-separated seeds, e.g. 0,1,2."),
        click.option("--out", default=None, help=f"Output root (default: ${OUTPUT_ENV} or ./runs)."),
        click.option("--dry-run", is_flag=True, help="Print the effective config and step estimate only."),
        click.option("--dqfa/--no-dqfa", default=None, help="Domain-query alignment."),
        click.option("--tiafa/--no-tiafa", default=None, help="Instance-aware token alignment."),
        click.option("--vpg/--no-vpg", default=None, help="Visual prompt generator."),
        click.option("--tau", type=float, default=None, help="Pseudo-label confidence threshold."),
        click.option("--epochs", type=int, default=None, help="Adaptation epochs per cycle."),
        click.option("--no-snapshots", is_flag=True, help="Skip per-cycle model snapshots."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _dry_run(cfg: ExperimentConfig, out: Path, rows: int) -> None:
    from .runner import estimate_steps

    click.echo(dump_config(cfg))
    steps = estimate_steps(cfg)
    steps["rows"] = rows
    steps["total"] *= rows
    click.echo(f"output directory: {out}")
    click.echo("estimated optimizer steps: " + json.dumps(steps))


def _guarded(fn, *args):
    try:
        return fn(*args)
    except ConfigError as err:
        _fail(EXIT_CONFIG, str(err))
    except TrainingDiverged as err:
        _fail(EXIT_RUNTIME, f"training aborted: {err}")
    except (RuntimeError, ValueError, OSError) as err:
        _fail(EXIT_RUNTIME, f"{type(err).__name__}: {err}")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Prompt-assisted domain adaptation of a cloud detector with edge retraining."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command()
@common_options
@click.option("--compare", is_flag=True, help="Also run the no-update baseline for a two-row table.")
def run(config_path, seed, seeds, out, dry_run, dqfa, tiafa, vpg, tau, epochs, no_snapshots, compare):
    """Collaboration cycles over every target stream, per seed."""
    from .runner import format_table, run_experiment

    cfg, out_dir = _resolve(config_path, seed, seeds, out, dqfa, tiafa, vpg, tau, epochs)
    if dry_run:
        _dry_run(cfg, out_dir, 2 if compare else 1)
        return
    summary = _guarded(run_experiment, cfg, out_dir, compare, not no_snapshots)
    click.echo(format_table(summary))
    click.echo(f"results written to {out_dir}")


@main.command()
@common_options
def ablation(config_path, seed, seeds, out, dry_run, dqfa, tiafa, vpg, tau, epochs, no_snapshots):
    """The five component combinations: none, DQFA, TIAFA, DQFA+TIAFA, all three."""
    from .runner import ABLATION_ROWS, format_table, run_ablation

    cfg, out_dir = _resolve(config_path, seed, seeds, out, None, None, None, tau, epochs)
    if any(v is not None for v in (dqfa, tiafa, vpg)):
        click.echo("note: component flags are ignored by the ablation grid", err=True)
    if dry_run:
        _dry_run(cfg, out_dir, len(ABLATION_ROWS))
        return
    summary = _guarded(run_ablation, cfg, out_dir, not no_snapshots)
    click.echo(format_table(summary, dict(ABLATION_ROWS)))
    click.echo(f"results written to {out_dir}")


@main.command()
@click.argument("report_dir", type=click.Path(file_okay=False))
@click.option("--out", default=None, help="Directory for the images (default: REPORT_DIR/plots).")
def plot(report_dir, out):
    """Bar charts from a run or ablation directory."""
    from .plots import plot_reports

    try:
        written = plot_reports(report_dir, out)
    except FileNotFoundError as err:
        _fail(EXIT_RUNTIME, str(err))
    for p in written:
        click.echo(str(p))


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML experiment config.")
@click.option("--out", default=None, help="Output directory (default: <root>/<name>/data).")
def gen_data(config_path, out):
    """Write the synthetic benchmark to disk."""
    from .runner import save_datasets

    cfg, run_dir = _resolve(config_path, None, None, None, None, None, None, None, None)
    target = Path(out) if out else run_dir / "data"
    written = _guarded(save_datasets, cfg, target)
    click.echo(f"wrote {len(written)} splits to {target}")


if __name__ == "__main__":
    main()
