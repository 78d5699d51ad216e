"""Experiment orchestrator: generate, pretrain, train, evaluate and report."""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace

import click
import numpy as np
from tqdm import tqdm

from errors import LabError
from file_handler import ArtifactStore
from metrics import (EPISODE_COLUMNS, NAV_KEYS, RETRIEVAL_KEYS, nav_metrics, progress_curve,
                     quartile_means, retrieval_metrics, tour_ndtw)
from nav_model import NavModel
from navigator import MODES, Navigator, expert_agreement, train_imitation
from scene import generate_scene, generate_tour, scene_from_document, scene_to_document
from utils import format_mean_std, get_version, make_rng
from validator import ConfigValidator, validate_outputs
from world_model import WorldModel, pretrain, rollout_expert

SPLITS = {'train': 0, 'eval': 1}
SUMMARY_KEYS = ('SR', 'SPL', 'nDTW', 'T-nDTW', 'OA', 'OR', 'HA', 'HR')
PRETRAIN_COLUMNS = ('iter', 'reward', 'nce', 'kl', 'total')
IMITATION_COLUMNS = ('iter', 'loss', 'accuracy', 'supervised')
SWEEP_COLUMNS = ('grid', 'rho_o', 'width', 'theta_h', 'max_patterns', 'SR', 'SPL', 'OA', 'OR', 'HA', 'HR')
OBSERVATION_GRID = [(rho, width) for rho in (0.0, 0.2, 0.5) for width in (4, 12)]
HISTORY_GRID = [(theta, patterns) for theta in (0.1, 0.2, 0.4) for patterns in (1, 10)]


def _derived_seed(*parts):
    return int(make_rng(*parts).integers(2 ** 31))


def _as_number(value, cast=float):
    if value in ('', None):
        return float('nan') if cast is float else None
    return cast(value)


class ExperimentRunner:
    """Runs every phase of an experiment against one output directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.store = ArtifactStore(cfg.output_dir)

    def setup(self):
        """Validate the config, create the run layout and archive the resolved config."""
        ConfigValidator(self.cfg).raise_for_errors()
        self.store.create_output_structure()
        self.store.write_json({'version': get_version(), 'config': self.cfg.to_dict()}, 'config.json')

    # Phase 1: scenes and tours

    def generate(self):
        self.setup()
        scene_cfg, tour_cfg = self.cfg.scene, self.cfg.tour
        click.echo(f"Generating scenes into {self.store.path('scenes')}")
        for split, code in SPLITS.items():
            count = scene_cfg.train_scenes if split == 'train' else scene_cfg.eval_scenes
            for index in range(count):
                seed = _derived_seed(scene_cfg.seed, code, index)
                scene = generate_scene(seed, scene_cfg.n_viewpoints, scene_cfg.avg_degree, scene_cfg.feat_dim,
                                       scene_cfg.view_count, scene_cfg.max_degree)
                tours = [generate_tour(scene, tour_cfg.n_episodes, _derived_seed(scene_cfg.seed, code, index, t + 1),
                                       tour_cfg.instruction_noise, tour_id=t)
                         for t in range(tour_cfg.tours_per_scene)]
                self.store.write_json(scene_to_document(scene, tours), f'scenes/{split}_{index:02d}.json')
            click.echo(f"  - {split}: {count} scenes x {tour_cfg.tours_per_scene} tours "
                       f"x {tour_cfg.n_episodes} episodes")
        return True

    def _load_split(self, split):
        files = [p for p in self.store.find_files('scenes', '.json') if p.name.startswith(f'{split}_')]
        if not files:
            raise LabError(f"no {split} scenes under {self.store.path('scenes')}; run generate first")
        loaded = []
        for index, path in enumerate(files):
            scene, tours = scene_from_document(self.store.read_json(f'scenes/{path.name}'))
            loaded.append((index, scene, tours))
        return loaded

    # Phase 2: world model

    def _world_model_path(self, seed):
        return f'snapshots/world_model_seed{seed}.bin'

    def _nav_model_path(self, seed):
        return f'snapshots/nav_model_seed{seed}.bin'

    def pretrain(self, resume=False):
        self.setup()
        training = self.cfg.training
        train = self._load_split('train')
        for seed in self.cfg.seeds:
            rng = make_rng(seed, 1)
            trajectories = [rollout_expert(scene, episode, rng, training.expert_strategy)[0]
                            for _, scene, tours in train for tour in tours for episode in tour.episodes]
            model = WorldModel(self.cfg.world_model, seed)
            previous = []
            snapshot = self._world_model_path(seed)
            curve_path = f'curves/pretrain_seed{seed}.csv'
            if resume and self.store.exists(snapshot):
                model.params.load_bytes(self.store.read_bytes(snapshot))
                if self.store.exists(curve_path):
                    previous = self.store.read_csv(curve_path)
            start = model.params.step
            click.echo(f"\nPretraining world model (seed {seed}, overshoot {self.cfg.world_model.horizon}): "
                       f"{len(trajectories)} expert trajectories, "
                       f"iterations {start}..{start + training.pretrain_iters}")
            curve = pretrain(model, trajectories, training.pretrain_iters, training.pretrain_lr,
                             batch_size=training.batch_size, seed=_derived_seed(seed, 2, start), progress=True)
            for row in curve:
                row['iter'] += start
            self.store.write_bytes(model.params.to_bytes(), snapshot)
            self.store.write_csv(previous + curve, PRETRAIN_COLUMNS, curve_path)
            if curve:
                click.echo(f"  - loss {curve[0]['total']:.4f} -> {curve[-1]['total']:.4f}")
        return True

    # Phase 3: imitation

    def _load_world_model(self, seed, required=True):
        model = WorldModel(self.cfg.world_model, seed)
        path = self._world_model_path(seed)
        if self.store.exists(path):
            model.params.load_bytes(self.store.read_bytes(path))
        elif required:
            raise LabError(f"missing world model snapshot {path}; run pretrain first")
        return model

    def _load_nav_model(self, seed):
        model = NavModel(self.cfg.nav_model, seed)
        path = self._nav_model_path(seed)
        if not self.store.exists(path):
            raise LabError(f"missing navigation model snapshot {path}; run train first")
        model.params.load_bytes(self.store.read_bytes(path))
        return model

    def _navigator(self, world_model, nav_model, mode, retrieval_cfg=None):
        training = self.cfg.training
        return Navigator(world_model, nav_model, retrieval_cfg or self.cfg.retrieval, mode,
                         training.max_steps, training.expert_strategy)

    def train(self):
        self.setup()
        training = self.cfg.training
        tours = [tour for _, _, scene_tours in self._load_split('train') for tour in scene_tours]
        for seed in self.cfg.seeds:
            world_model = self._load_world_model(seed)
            navigator = self._navigator(world_model, NavModel(self.cfg.nav_model, seed), 'memoir')
            click.echo(f"\nImitation learning (seed {seed}, {training.rollout} rollouts): "
                       f"{len(tours)} tours, {training.imitation_iters} iterations")
            before = expert_agreement(navigator, tours, seed)
            curve = train_imitation(navigator, tours, training.imitation_lr, training.imitation_iters,
                                    seed=_derived_seed(seed, 4), rollout=training.rollout,
                                    freeze_world_model=training.freeze_world_model,
                                    world_model_lr=training.world_model_lr, progress=True)
            after = expert_agreement(navigator, tours, seed)
            click.echo(f"  - expert agreement {before:.3f} -> {after:.3f}")
            self.store.write_bytes(navigator.nav_model.params.to_bytes(), self._nav_model_path(seed))
            if not training.freeze_world_model:
                self.store.write_bytes(world_model.params.to_bytes(), self._world_model_path(seed))
            self.store.write_csv(curve, IMITATION_COLUMNS, f'curves/imitation_seed{seed}.csv')
        return True

    # Phase 4: evaluation

    def _evaluate_scene(self, mode, seed, index, scene, tours, retrieval_cfg=None):
        world_model = self._load_world_model(seed, required=mode != 'no-memory')
        navigator = self._navigator(world_model, self._load_nav_model(seed), mode, retrieval_cfg)
        rng = make_rng(seed, 3, index)
        rows, records = [], []
        for tour in tours:
            traces, _ = navigator.run_tour(tour, rng=rng)
            episode_rows = []
            for position, (trace, episode) in enumerate(zip(traces, tour.episodes)):
                row = {'row_type': 'episode', 'mode': mode, 'seed': seed, 'scene': index, 'tour': tour.tour_id,
                       'episode': episode.episode_id, 'position': position, 'n_episodes': len(tour.episodes)}
                row.update(nav_metrics(trace, episode, scene))
                row.update(retrieval_metrics(trace, episode))
                episode_rows.append(row)
                records.extend(trace.to_records())
            tour_row = {'row_type': 'tour', 'mode': mode, 'seed': seed, 'scene': index, 'tour': tour.tour_id}
            for key in NAV_KEYS + RETRIEVAL_KEYS:
                tour_row[key] = float(np.mean([r[key] for r in episode_rows]))
            tour_row['T-nDTW'] = tour_ndtw(traces, list(tour.episodes), scene, self.cfg.training.t_ndtw)
            rows.extend(episode_rows)
            rows.append(tour_row)
        return (MODES.index(mode), seed, index), rows, records

    def _fan_out(self, tasks, description, retrieval_cfg=None):
        """Run (mode, seed, scene) tasks on worker threads; results come back sorted."""
        results = []
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            futures = [pool.submit(self._evaluate_scene, mode, seed, index, scene, tours, retrieval_cfg)
                       for mode, seed, index, scene, tours in tasks]
            for future in tqdm(as_completed(futures), total=len(futures), desc=description):
                results.append(future.result())
        return sorted(results, key=lambda result: result[0])

    def evaluate(self):
        self.setup()
        scenes = self._load_split('eval')
        for seed in self.cfg.seeds:
            for mode in self.cfg.modes:
                self._load_world_model(seed, required=mode != 'no-memory')
            self._load_nav_model(seed)
        tasks = [(mode, seed, index, scene, tours)
                 for mode in self.cfg.modes for seed in self.cfg.seeds for index, scene, tours in scenes]
        click.echo(f"\nEvaluating {len(self.cfg.modes)} modes x {len(self.cfg.seeds)} seeds "
                   f"x {len(scenes)} held-out scenes on {self.cfg.workers} worker(s)")
        rows = []
        for (_, seed, index), task_rows, records in self._fan_out(tasks, "Evaluating"):
            rows.extend(task_rows)
            mode = task_rows[0]['mode']
            self.store.write_jsonl(records, f'traces/{mode}_seed{seed}_scene{index:02d}.jsonl')
        self.store.write_csv(rows, EPISODE_COLUMNS, 'metrics.csv')
        click.echo(f"Wrote {sum(r['row_type'] == 'episode' for r in rows)} episode rows to "
                   f"{self.store.path('metrics.csv')}")
        self._summarize(rows)
        return True

    def validate(self):
        """Check that the run directory holds every artifact of a finished evaluation."""
        click.echo("\nRunning validation...")
        problems = validate_outputs(self.store.output_dir, self.cfg.modes)
        for problem in problems:
            click.echo(f"  - {problem}")
        return not problems

    # Phase 5: summaries

    def _read_metrics(self):
        if not self.store.exists('metrics.csv'):
            raise LabError(f"missing {self.store.path('metrics.csv')}; run evaluate first")
        rows = []
        for raw in self.store.read_csv('metrics.csv'):
            row = {'row_type': raw['row_type'], 'mode': raw['mode']}
            for key in ('seed', 'scene', 'tour', 'episode', 'position'):
                row[key] = _as_number(raw[key], int)
            for key in NAV_KEYS + RETRIEVAL_KEYS + ('T-nDTW',):
                row[key] = _as_number(raw[key])
            rows.append(row)
        counts = {}
        for row in rows:
            if row['row_type'] == 'episode':
                group = (row['mode'], row['seed'], row['scene'], row['tour'])
                counts[group] = counts.get(group, 0) + 1
        for row in rows:
            if row['row_type'] == 'episode':
                row['n_episodes'] = counts[(row['mode'], row['seed'], row['scene'], row['tour'])]
        return rows

    def _seed_means(self, rows, mode, key):
        """Mean of ``key`` per seed for one mode; T-nDTW comes from tour rows."""
        row_type = 'tour' if key == 'T-nDTW' else 'episode'
        per_seed = {}
        for row in rows:
            if row['mode'] == mode and row['row_type'] == row_type:
                per_seed.setdefault(row['seed'], []).append(row[key])
        return {seed: float(np.mean(values)) for seed, values in sorted(per_seed.items())}

    def _ablation(self, rows):
        table = []
        for mode in MODES:
            entry = {'mode': mode, 'n_seeds': len(self._seed_means(rows, mode, 'SR'))}
            for key in SUMMARY_KEYS:
                mean, std = format_mean_std(list(self._seed_means(rows, mode, key).values()))
                entry[f'{key}_mean'], entry[f'{key}_std'] = mean, std
            table.append(entry)
        return table

    def _plot_progress(self, rows, key):
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt

        plt.rcParams['svg.hashsalt'] = 'memoir-lab'
        fig, ax = plt.subplots(figsize=(6, 4))
        deciles = np.arange(1, 11)
        for mode in MODES:
            mode_rows = [r for r in rows if r['mode'] == mode and r['row_type'] == 'episode']
            if mode_rows:
                ax.plot(deciles, progress_curve(mode_rows, key), marker='o', label=mode)
        ax.set_xlabel('tour progress (decile)')
        ax.set_ylabel(key)
        ax.set_xticks(deciles)
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc='best', fontsize='small')
        fig.tight_layout()
        output_path = self.store.path('plots', f'progress_{key.lower()}.svg')
        output_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output_path, format='svg', metadata={'Date': None})
        plt.close(fig)
        return output_path

    def _summarize(self, rows):
        table = self._ablation(rows)
        columns = ('mode', 'n_seeds') + tuple(f'{k}_{s}' for k in SUMMARY_KEYS for s in ('mean', 'std'))
        self.store.write_csv(table, columns, 'ablation.csv')
        for key in ('SR', 'SPL'):
            self._plot_progress(rows, key)

        click.echo("\nAblation summary (mean over seeds):")
        click.echo("-" * 50)
        for entry in table:
            if entry['n_seeds']:
                click.echo(f"  {entry['mode']:<14} SR {entry['SR_mean']:.3f}  SPL {entry['SPL_mean']:.3f}  "
                           f"OA {entry['OA_mean']:.3f}  OR {entry['OR_mean']:.3f}  "
                           f"HA {entry['HA_mean']:.3f}  HR {entry['HR_mean']:.3f}")
        click.echo("-" * 50)
        return table

    def ordering_checks(self, rows):
        """Per-seed SPL ordering no-memory < memoir < oracle-memory and the memoir SR trend."""
        spl = {mode: self._seed_means(rows, mode, 'SPL') for mode in ('no-memory', 'memoir', 'oracle-memory')}
        seeds = sorted(set.intersection(*(set(v) for v in spl.values()))) if all(spl.values()) else []
        checks = {}
        if seeds:
            needed = (2 * len(seeds) + 2) // 3
            pairs = (('no-memory', 'memoir'), ('memoir', 'oracle-memory'), ('no-memory', 'oracle-memory'))
            for low, high in pairs:
                wins = sum(spl[low][s] < spl[high][s] for s in seeds)
                checks[f'SPL {low} < {high}'] = (wins >= needed, f"{wins}/{len(seeds)} seeds")
            gap = np.mean([spl['oracle-memory'][s] - spl['no-memory'][s] for s in seeds])
            checks['SPL oracle-memory - no-memory >= 0.10'] = (gap >= 0.10, f"gap {gap:.3f}")

        memoir_seeds = sorted({r['seed'] for r in rows if r['mode'] == 'memoir' and r['row_type'] == 'episode'})
        if memoir_seeds:
            rising = 0
            for seed in memoir_seeds:
                seed_rows = [r for r in rows
                             if r['mode'] == 'memoir' and r['seed'] == seed and r['row_type'] == 'episode']
                first, last = quartile_means(seed_rows, 'SR')
                rising += int(last >= first)
            needed = (2 * len(memoir_seeds) + 2) // 3
            checks['memoir SR last quartile >= first quartile'] = (
                rising >= needed, f"{rising}/{len(memoir_seeds)} seeds")
        return checks

    def sweep(self):
        """Re-evaluate memoir over small retrieval grids on the first seed."""
        scenes = self._load_split('eval')
        seed = self.cfg.seeds[0]
        base = self.cfg.retrieval
        settings = [('observation', replace(base, rho_o=rho, width=width)) for rho, width in OBSERVATION_GRID]
        settings += [('history', replace(base, theta_h=theta, max_patterns=patterns))
                     for theta, patterns in HISTORY_GRID]
        table = []
        for grid, retrieval_cfg in tqdm(settings, desc="Sweeping retrieval"):
            tasks = [('memoir', seed, index, scene, tours) for index, scene, tours in scenes]
            rows = [row for _, task_rows, _ in self._fan_out(tasks, grid, retrieval_cfg)
                    for row in task_rows if row['row_type'] == 'episode']
            entry = {'grid': grid, 'rho_o': retrieval_cfg.rho_o, 'width': retrieval_cfg.width,
                     'theta_h': retrieval_cfg.theta_h, 'max_patterns': retrieval_cfg.max_patterns}
            for key in ('SR', 'SPL') + RETRIEVAL_KEYS:
                entry[key] = float(np.mean([r[key] for r in rows]))
            table.append(entry)
        self.store.write_csv(table, SWEEP_COLUMNS, 'sweep.csv')
        click.echo(f"Wrote {len(table)} sweep settings to {self.store.path('sweep.csv')}")
        return table

    def report(self, sweep=False):
        self.setup()
        rows = self._read_metrics()
        self._summarize(rows)
        checks = self.ordering_checks(rows)
        if checks:
            click.echo("\nOrdering checks:")
            for name, (passed, detail) in checks.items():
                click.echo(f"  [{'PASS' if passed else 'FAIL'}] {name} ({detail})")
            passed = sum(1 for ok, _ in checks.values() if ok)
            click.echo(f"  {passed}/{len(checks)} ordering checks passed")
        if sweep:
            self.sweep()
        return checks

    def run_all(self):
        """Every phase in order; returns the ordering checks of the final report."""
        if not (self.generate() and self.pretrain() and self.train() and self.evaluate()):
            return None
        return self.report()
