"""Command-line interface for the memory-persistent navigation lab."""

import sys

import click

from config import apply_overrides, load_config
from errors import ConfigError, DivergenceError, LabError
from experiment import ExperimentRunner
from navigator import MODES
from utils import __version__
from validator import ConfigValidator


def common_options(command):
    """--config, --seed, --mode and --out, shared by every subcommand."""
    options = [
        click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     default=None, help='JSON experiment config (defaults apply when omitted)'),
        click.option('--seed', '-s', type=click.IntRange(min=0), default=None,
                     help='Run a single seed instead of the configured list'),
        click.option('--mode', '-m', 'modes', type=click.Choice(MODES), multiple=True,
                     help='Restrict to these memory modes (repeatable)'),
        click.option('--out', '-o', type=click.Path(file_okay=False), default=None,
                     help='Output directory (overrides output_dir)'),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _runner(config_path, seed, modes, out, overshoot=None):
    cfg = apply_overrides(load_config(config_path), seed=seed, modes=modes, out=out, overshoot=overshoot)
    validator = ConfigValidator(cfg)
    if not validator.validate():
        validator.report()
        raise ConfigError("invalid configuration: " + "; ".join(validator.errors))
    for warning in validator.warnings:
        click.echo(f"Warning: {warning}")
    return ExperimentRunner(cfg)


def _run(action):
    """Call ``action`` and map lab errors onto exit codes 2 (config), 3 (divergence) and 1."""
    try:
        return action()
    except ConfigError as e:
        click.echo(f"Configuration error: {e}", err=True)
        sys.exit(2)
    except DivergenceError as e:
        click.echo(f"Training diverged: {e}", err=True)
        if e.iteration is not None:
            click.echo(f"  iteration: {e.iteration}, op: {e.op}", err=True)
        for row in e.history[-5:]:
            click.echo(f"  {row}", err=True)
        sys.exit(3)
    except LabError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@click.group()
@click.version_option(__version__, prog_name='memoir-lab')
def cli():
    """Memory-persistent vision-and-language navigation on procedural scenes.

    Pipeline: generate -> pretrain -> train -> evaluate -> report.
    """


@cli.command()
@common_options
def generate(config_path, seed, modes, out):
    """Generate training and held-out scenes with their tours."""
    _run(lambda: _runner(config_path, seed, modes, out).generate())
    click.echo("\nGeneration completed successfully!")


@cli.command('pretrain')
@common_options
@click.option('--overshoot', '-d', type=click.IntRange(min=1), default=None,
              help='Overshooting distance D (overrides world_model.horizon)')
@click.option('--resume', is_flag=True, default=False, help='Continue from an existing snapshot')
def pretrain_command(config_path, seed, modes, out, overshoot, resume):
    """Pretrain the world model on expert trajectories."""
    _run(lambda: _runner(config_path, seed, modes, out, overshoot).pretrain(resume=resume))
    click.echo("\nPretraining completed successfully!")


@cli.command()
@common_options
def train(config_path, seed, modes, out):
    """Train the navigation model by imitation of the expert."""
    _run(lambda: _runner(config_path, seed, modes, out).train())
    click.echo("\nImitation completed successfully!")


@cli.command()
@common_options
@click.option('--validate', is_flag=True, default=False, help='Check the run directory afterwards')
def evaluate(config_path, seed, modes, out, validate):
    """Evaluate every mode x seed x held-out tour and write metrics, traces and plots."""
    runner = _run(lambda: _runner(config_path, seed, modes, out))
    _run(runner.evaluate)
    if validate:
        if not _run(runner.validate):
            click.echo("Validation failed! Check the errors above.")
            sys.exit(1)
        click.echo("Validation passed!")
    click.echo("\nEvaluation completed successfully!")


def _enforce(checks, strict):
    """With ``strict``, any failed ordering check exits 1."""
    failed = [name for name, (passed, _) in (checks or {}).items() if not passed]
    if strict and failed:
        click.echo(f"Ordering checks failed: {', '.join(failed)}", err=True)
        sys.exit(1)


@cli.command()
@common_options
@click.option('--sweep', is_flag=True, default=False, help='Also sweep retrieval hyperparameters (memoir mode)')
@click.option('--strict', is_flag=True, default=False, help='Exit 1 when an ordering check fails')
def report(config_path, seed, modes, out, sweep, strict):
    """Summarize metrics.csv into the ablation table, plots and ordering checks."""
    checks = _run(lambda: _runner(config_path, seed, modes, out).report(sweep=sweep))
    _enforce(checks, strict)


@cli.command('run')
@common_options
@click.option('--strict', is_flag=True, default=False, help='Exit 1 when an ordering check fails')
def run_all(config_path, seed, modes, out, strict):
    """Run the whole pipeline."""
    checks = _run(lambda: _runner(config_path, seed, modes, out).run_all())
    _enforce(checks, strict)
    click.echo("\nPipeline completed successfully!")


if __name__ == '__main__':
    cli()
