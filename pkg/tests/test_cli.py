import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from errors import DivergenceError
from main import cli
from navigator import MODES

TINY = {
    'scene': {'n_viewpoints': 8, 'feat_dim': 4, 'view_count': 4, 'max_degree': 4,
              'train_scenes': 1, 'eval_scenes': 1},
    'tour': {'n_episodes': 4},
    'world_model': {'deter_dim': 4, 'stoch_dim': 2, 'embed_dim': 4, 'horizon': 2},
    'retrieval': {'width': 3, 'max_patterns': 2},
    'nav_model': {'hidden_dim': 8},
    'training': {'pretrain_iters': 2, 'batch_size': 2, 'imitation_iters': 2, 'max_steps': 4},
    'seeds': [0],
}


def _config(tmp_path, **changes):
    values = json.loads(json.dumps(TINY))
    values.update(changes)
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(values))
    return str(path)


def _invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def _pipeline(config, out):
    for command in ('generate', 'pretrain', 'train'):
        result = _invoke(command, '-c', config, '-o', out)
        assert result.exit_code == 0, result.output
    return _invoke('evaluate', '-c', config, '-o', out, '--validate')


@pytest.fixture(scope='module')
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    config = _config(root)
    result = _pipeline(config, root / 'run')
    assert result.exit_code == 0, result.output
    return config, root / 'run', result


def test_version():
    result = _invoke('--version')
    assert result.exit_code == 0
    assert 'memoir-lab' in result.output


def test_pipeline_writes_every_artifact(finished_run):
    _, out, result = finished_run
    assert 'Validation passed!' in result.output
    assert (out / 'scenes' / 'train_00.json').is_file()
    assert (out / 'scenes' / 'eval_00.json').is_file()
    assert (out / 'snapshots' / 'world_model_seed0.bin').is_file()
    assert (out / 'snapshots' / 'nav_model_seed0.bin').is_file()
    assert (out / 'curves' / 'pretrain_seed0.csv').is_file()
    assert (out / 'curves' / 'imitation_seed0.csv').is_file()
    for mode in MODES:
        assert (out / 'traces' / f'{mode}_seed0_scene00.jsonl').is_file()
    metrics = (out / 'metrics.csv').read_text().splitlines()
    assert metrics[0].startswith('row_type,mode,seed')
    assert sum(line.startswith('episode,') for line in metrics) == 4 * len(MODES)
    assert sum(line.startswith('tour,') for line in metrics) == len(MODES)


def test_config_is_archived(finished_run):
    _, out, _ = finished_run
    archived = json.loads((out / 'config.json').read_text())
    assert archived['config']['scene']['n_viewpoints'] == 8
    assert archived['config']['output_dir'] == str(out)


def test_report_prints_ordering_checks(finished_run):
    config, out, _ = finished_run
    result = _invoke('report', '-c', config, '-o', out)
    assert result.exit_code == 0, result.output
    assert 'Ablation summary' in result.output
    assert 'Ordering checks' in result.output
    assert (out / 'ablation.csv').read_text().count('\n') == len(MODES) + 1


@pytest.mark.parametrize('passed, code', [(True, 0), (False, 1)])
def test_strict_report_fails_on_a_failed_ordering_check(finished_run, monkeypatch, passed, code):
    config, out, _ = finished_run
    monkeypatch.setattr('experiment.ExperimentRunner.ordering_checks',
                        lambda self, rows: {'SPL no-memory < memoir': (passed, '2/3 seeds')})
    loose = _invoke('report', '-c', config, '-o', out)
    assert loose.exit_code == 0, loose.output
    strict = _invoke('report', '-c', config, '-o', out, '--strict')
    assert strict.exit_code == code, strict.output
    assert f"{int(passed)}/1 ordering checks passed" in strict.output
    if not passed:
        assert '[FAIL] SPL no-memory < memoir' in strict.output
        assert 'Ordering checks failed' in strict.output


@pytest.mark.slow
def test_shipped_benchmark_passes_its_ordering_checks(tmp_path):
    config = Path(__file__).resolve().parent.parent / 'configs' / 'toy_benchmark.json'
    result = _invoke('run', '-c', config, '-o', tmp_path / 'toy', '--strict')
    assert result.exit_code == 0, result.output


def test_reruns_are_byte_identical(finished_run, tmp_path):
    config, out, _ = finished_run
    again = tmp_path / 'again'
    assert _pipeline(config, again).exit_code == 0
    for name in ('scenes/eval_00.json', 'metrics.csv', 'ablation.csv', 'traces/memoir_seed0_scene00.jsonl',
                 'snapshots/nav_model_seed0.bin'):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_resume_continues_the_step_counter(tmp_path):
    config = _config(tmp_path)
    out = tmp_path / 'run'
    assert _invoke('generate', '-c', config, '-o', out).exit_code == 0
    assert _invoke('pretrain', '-c', config, '-o', out).exit_code == 0
    result = _invoke('pretrain', '-c', config, '-o', out, '--resume')
    assert result.exit_code == 0, result.output
    assert 'iterations 2..4' in result.output
    rows = (out / 'curves' / 'pretrain_seed0.csv').read_text().splitlines()[1:]
    assert [int(row.split(',')[0]) for row in rows] == [0, 1, 2, 3]


def test_no_memory_needs_no_world_model(tmp_path):
    config = _config(tmp_path)
    out = tmp_path / 'run'
    for command in ('generate', 'pretrain', 'train'):
        assert _invoke(command, '-c', config, '-o', out).exit_code == 0
    (out / 'snapshots' / 'world_model_seed0.bin').unlink()
    result = _invoke('evaluate', '-c', config, '-o', out, '-m', 'no-memory')
    assert result.exit_code == 0, result.output
    failed = _invoke('evaluate', '-c', config, '-o', out, '-m', 'memoir')
    assert failed.exit_code == 1
    assert 'run pretrain first' in failed.output


def test_unknown_key_exits_with_config_error(tmp_path):
    config = _config(tmp_path, scene={'n_viewpoint': 8})
    result = _invoke('generate', '-c', config, '-o', tmp_path / 'run')
    assert result.exit_code == 2
    assert 'scene.n_viewpoint' in result.output


def test_invalid_value_exits_with_config_error(tmp_path):
    config = _config(tmp_path, retrieval={'width': 0})
    result = _invoke('generate', '-c', config, '-o', tmp_path / 'run')
    assert result.exit_code == 2
    assert 'retrieval.width' in result.output
    assert not (tmp_path / 'run').exists()


def test_evaluate_before_training_fails(tmp_path):
    config = _config(tmp_path)
    out = tmp_path / 'run'
    assert _invoke('generate', '-c', config, '-o', out).exit_code == 0
    result = _invoke('evaluate', '-c', config, '-o', out)
    assert result.exit_code == 1
    assert 'snapshot' in result.output


def test_train_before_generate_fails(tmp_path):
    result = _invoke('train', '-c', _config(tmp_path), '-o', tmp_path / 'run')
    assert result.exit_code == 1
    assert 'run generate first' in result.output


def test_divergence_exits_with_code_three(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergenceError("loss is nan", op='reward.b', iteration=0, history=[{'iter': 0, 'total': 1.0}])

    monkeypatch.setattr('experiment.pretrain', diverge)
    config = _config(tmp_path)
    out = tmp_path / 'run'
    assert _invoke('generate', '-c', config, '-o', out).exit_code == 0
    result = _invoke('pretrain', '-c', config, '-o', out)
    assert result.exit_code == 3
    assert 'iteration: 0, op: reward.b' in result.output
