"""Experiment configuration: nested dataclasses loaded from JSON."""

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from errors import ConfigError
from memory import RetrievalConfig
from nav_model import NavModelConfig
from navigator import MODES
from world_model import WorldModelConfig


@dataclass
class SceneConfig:
    seed: int = 0
    n_viewpoints: int = 24
    avg_degree: float = 3.0
    feat_dim: int = 16
    view_count: int = 8
    max_degree: int = 6
    train_scenes: int = 5
    eval_scenes: int = 5


@dataclass
class TourConfig:
    n_episodes: int = 20
    tours_per_scene: int = 1
    instruction_noise: float = 0.1


@dataclass
class TrainingConfig:
    pretrain_iters: int = 300
    pretrain_lr: float = 3e-3
    batch_size: int = 8
    imitation_iters: int = 500
    imitation_lr: float = 2e-3
    world_model_lr: float = 1e-3
    freeze_world_model: bool = True
    rollout: str = 'teacher'
    expert_strategy: str = 'random'
    max_steps: int = 15
    t_ndtw: str = 'concat'


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    tour: TourConfig = field(default_factory=TourConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    nav_model: NavModelConfig = field(default_factory=NavModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    modes: list = field(default_factory=lambda: list(MODES))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = 'runs/toy'
    workers: int = 1

    def resolve(self):
        """Fill dimensions that follow from other sections."""
        self.world_model.feat_dim = self.scene.feat_dim
        self.world_model.instr_dim = 2 * self.scene.feat_dim
        self.nav_model.feat_dim = self.scene.feat_dim
        self.nav_model.state_dim = self.world_model.deter_dim + self.world_model.stoch_dim
        return self

    def to_dict(self):
        return asdict(self)


def _coerce(value, default, dotted):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected true/false, got {value!r}", [dotted])
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected an integer, got {value!r}", [dotted])
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected a number, got {value!r}", [dotted])
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted}: expected a string, got {value!r}", [dotted])
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{dotted}: expected a list, got {value!r}", [dotted])
        return list(value)
    return value


def _merge(instance, values, prefix):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object", [prefix])
    known = {f.name: f for f in fields(instance)}
    for key, value in values.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"{dotted}: unknown configuration key", [dotted])
        current = getattr(instance, key)
        if is_dataclass(current):
            _merge(current, value, dotted)
        else:
            setattr(instance, key, _coerce(value, current, dotted))
    return instance


def config_from_dict(values):
    return _merge(ExperimentConfig(), values, '').resolve()


def load_config(path=None):
    """Defaults, overlaid with the JSON file at ``path`` when given."""
    if path is None:
        return ExperimentConfig().resolve()
    try:
        with open(Path(path), 'r', encoding='utf-8') as f:
            values = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(values)


def apply_overrides(cfg, seed=None, modes=None, out=None, overshoot=None):
    """Command-line flags win over the file."""
    if seed is not None:
        cfg.seeds = [seed]
    if modes:
        cfg.modes = list(modes)
    if out is not None:
        cfg.output_dir = str(out)
    if overshoot is not None:
        cfg.world_model.horizon = overshoot
    return cfg.resolve()
