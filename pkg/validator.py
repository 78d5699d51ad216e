"""Validation of experiment configurations and run directories."""

from pathlib import Path

import click

from errors import ConfigError
from navigator import MODES, ROLLOUTS
from metrics import T_NDTW_AGGREGATIONS

EXPERT_STRATEGIES = ('random', 'deterministic')


class ConfigValidator:
    """Collects every problem of a config; each message names the dotted field."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.errors = []
        self.warnings = []

    def validate(self):
        """Run all checks; True when there are no errors."""
        self.errors = []
        self.warnings = []
        self._validate_sections()
        self._validate_scene()
        self._validate_training()
        self._validate_experiment()
        return len(self.errors) == 0

    def raise_for_errors(self):
        if not self.validate():
            fields = [message.split(':', 1)[0] for message in self.errors]
            raise ConfigError("invalid configuration: " + "; ".join(self.errors), fields)
        return self

    def _add(self, section, problems):
        for name, message in problems:
            self.errors.append(f"{section}.{name}: {message}")

    def _validate_sections(self):
        self._add('world_model', self.cfg.world_model.validate())
        self._add('retrieval', self.cfg.retrieval.validate())
        self._add('nav_model', self.cfg.nav_model.validate())

    def _validate_scene(self):
        scene, tour = self.cfg.scene, self.cfg.tour
        if scene.n_viewpoints < 4:
            self.errors.append("scene.n_viewpoints: must be >= 4")
        if scene.avg_degree < 2:
            self.errors.append("scene.avg_degree: must be >= 2")
        if scene.feat_dim < 4:
            self.errors.append("scene.feat_dim: must be >= 4")
        if scene.view_count < 1:
            self.errors.append("scene.view_count: must be >= 1")
        if scene.max_degree < 2:
            self.errors.append("scene.max_degree: must be >= 2")
        elif scene.max_degree < scene.avg_degree:
            self.errors.append("scene.max_degree: must be >= scene.avg_degree")
        if scene.train_scenes < 1:
            self.errors.append("scene.train_scenes: must be >= 1")
        if scene.eval_scenes < 1:
            self.errors.append("scene.eval_scenes: must be >= 1")
        if tour.n_episodes < 1:
            self.errors.append("tour.n_episodes: must be >= 1")
        if tour.tours_per_scene < 1:
            self.errors.append("tour.tours_per_scene: must be >= 1")
        if tour.instruction_noise < 0:
            self.errors.append("tour.instruction_noise: must be >= 0")
        if tour.n_episodes < 4:
            self.warnings.append("tour.n_episodes: fewer than 4 episodes leaves empty progress quartiles")

    def _validate_training(self):
        training = self.cfg.training
        for name in ('pretrain_iters', 'imitation_iters'):
            if getattr(training, name) < 0:
                self.errors.append(f"training.{name}: must be >= 0")
        for name in ('pretrain_lr', 'imitation_lr', 'world_model_lr'):
            if getattr(training, name) < 0:
                self.errors.append(f"training.{name}: must be >= 0")
        if training.batch_size < 1:
            self.errors.append("training.batch_size: must be >= 1")
        if training.max_steps < 1:
            self.errors.append("training.max_steps: must be >= 1")
        if training.rollout not in ROLLOUTS:
            self.errors.append(f"training.rollout: must be one of {', '.join(ROLLOUTS)}")
        if training.expert_strategy not in EXPERT_STRATEGIES:
            self.errors.append(f"training.expert_strategy: must be one of {', '.join(EXPERT_STRATEGIES)}")
        if training.t_ndtw not in T_NDTW_AGGREGATIONS:
            self.errors.append(f"training.t_ndtw: must be one of {', '.join(T_NDTW_AGGREGATIONS)}")
        if training.pretrain_iters == 0:
            self.warnings.append("training.pretrain_iters: 0 keeps the world model at its random initialization")

    def _validate_experiment(self):
        cfg = self.cfg
        unknown = [m for m in cfg.modes if m not in MODES]
        if unknown:
            self.errors.append(f"modes: unknown mode(s) {', '.join(map(str, unknown))}")
        if not cfg.modes:
            self.errors.append("modes: at least one mode is required")
        if not cfg.seeds:
            self.errors.append("seeds: at least one seed is required")
        if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in cfg.seeds):
            self.errors.append("seeds: seeds must be non-negative integers")
        if len(set(cfg.seeds)) != len(cfg.seeds):
            self.errors.append("seeds: seeds must be distinct")
        if cfg.workers < 1:
            self.errors.append("workers: must be >= 1")
        if not cfg.output_dir:
            self.errors.append("output_dir: must not be empty")

    def report(self):
        """Echo the validation results."""
        click.echo("\nValidation Results:")
        click.echo("-" * 50)
        if self.errors:
            click.echo(f"\nFound {len(self.errors)} errors:")
            for error in self.errors[:10]:
                click.echo(f"  - {error}")
            if len(self.errors) > 10:
                click.echo(f"  ... and {len(self.errors) - 10} more errors")
        else:
            click.echo("No errors found!")
        if self.warnings:
            click.echo(f"\nFound {len(self.warnings)} warnings:")
            for warning in self.warnings[:10]:
                click.echo(f"  - {warning}")
        click.echo("-" * 50)


def validate_outputs(out_dir, modes=()):
    """Problems with a finished run directory (missing artifacts); empty when complete."""
    root = Path(out_dir)
    problems = []
    for name in ('config.json', 'metrics.csv', 'ablation.csv'):
        if not (root / name).is_file():
            problems.append(f"missing {name}")
    for mode in modes:
        if not list((root / 'traces').glob(f'{mode}_*.jsonl')):
            problems.append(f"no traces for mode {mode}")
    for key in ('sr', 'spl'):
        if not (root / 'plots' / f'progress_{key}.svg').is_file():
            problems.append(f"missing plots/progress_{key}.svg")
    return problems
