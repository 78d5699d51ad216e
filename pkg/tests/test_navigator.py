import json
from types import SimpleNamespace

import networkx as nx
import numpy as np
import pytest

from conftest import FEAT, line_scene
from file_handler import dumps_json
from memory import MemoryBanks
from metrics import nav_metrics
from navigator import MODES, Navigator, expert_agreement, navigate_episode, train_imitation
from scene import STOP, Episode, SceneGraph
from topological_map import EpisodicGraph


def _navigator(world_model, nav_model, retrieval_config, mode='memoir', **kwargs):
    return Navigator(world_model, nav_model, retrieval_config, mode=mode, **kwargs)


@pytest.mark.parametrize('mode', MODES)
def test_traces_only_follow_scene_edges(mode, world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, mode)
    traces, _ = navigator.run_tour(toy_tour, rng=np.random.default_rng(0))
    scene = toy_tour.scene
    assert len(traces) == len(toy_tour.episodes)
    for trace, episode in zip(traces, toy_tour.episodes):
        assert trace.path[0] == episode.start
        assert all(scene.graph.has_edge(a, b) for a, b in zip(trace.path[:-1], trace.path[1:]))
        assert 1 <= len(trace.steps) <= navigator.max_steps
        assert trace.mode == mode
        walked = [trace.path[0]] + [hop for step in trace.steps for hop in step.hops]
        assert walked == trace.path


def test_banks_grow_monotonically_over_a_tour(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    banks = MemoryBanks()
    sizes = []
    for episode in toy_tour.episodes:
        trace = navigate_episode(toy_tour.scene, episode, banks, navigator, np.random.default_rng(0))
        sizes.append((len(banks.graph), len(banks.observations), len(banks.history)))
        assert set(s.viewpoint for s in trace.steps) <= set(banks.observations.viewpoints())
    assert sizes == sorted(sizes)
    assert sizes[-1][2] == sum(1 for _ in banks.history.records)


def test_no_memory_retrieves_nothing_but_still_stores(world_model, nav_model, retrieval_config, toy_tour,
                                                      monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("no-memory must not imagine")

    monkeypatch.setattr(world_model, 'imagine', refuse)
    navigator = _navigator(world_model, nav_model, retrieval_config, 'no-memory')
    traces, banks = navigator.run_tour(toy_tour, rng=np.random.default_rng(0))
    for trace in traces:
        for step in trace.steps:
            assert step.retrieved_observations == []
            assert step.retrieved_histories == []
            assert step.horizon == 0
    assert len(banks.observations) > 0
    assert all(len(record.trajectory) == 0 for record in banks.history.records)


def test_every_walked_viewpoint_is_stored(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    banks = MemoryBanks()
    for episode in toy_tour.episodes:
        trace = navigate_episode(toy_tour.scene, episode, banks, navigator, np.random.default_rng(0))
        walked = trace.path if trace.stopped else trace.path[:-1]
        assert [r.viewpoint for r in banks.history.by_episode[episode.episode_id]] == walked
        assert set(walked) <= set(banks.observations.viewpoints())


def test_oracle_memory_retrieves_teacher_viewpoints_in_range(world_model, nav_model, retrieval_config,
                                                            toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, 'oracle-memory')
    traces, _ = navigator.run_tour(toy_tour, rng=np.random.default_rng(0))
    for trace, episode in zip(traces, toy_tour.episodes):
        teacher = set(episode.teacher_path)
        for step in trace.steps:
            assert step.retrieved_observations == sorted(set(step.observation_ring) & teacher)
            for pattern in step.retrieved_histories:
                assert pattern['episode_id'] != episode.episode_id
                assert set(pattern['viewpoints']) <= teacher


def test_full_memory_retrieves_the_whole_ring(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, 'full-memory')
    traces, _ = navigator.run_tour(toy_tour, rng=np.random.default_rng(0))
    for trace in traces:
        for step in trace.steps:
            assert set(step.observation_ring) <= set(step.retrieved_observations)
            assert step.viewpoint not in step.retrieved_observations


def test_memoir_retrieval_stays_within_the_ring(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    traces, _ = navigator.run_tour(toy_tour, rng=np.random.default_rng(0))
    for trace, episode in zip(traces, toy_tour.episodes):
        for step in trace.steps:
            assert len(step.retrieved_histories) <= retrieval_config.max_patterns
            assert all(p['episode_id'] != episode.episode_id for p in step.retrieved_histories)
            assert 1 <= step.horizon <= world_model.cfg.horizon


def test_single_step_budget(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, max_steps=1)
    trace = navigate_episode(toy_tour.scene, toy_tour.episodes[0], MemoryBanks(), navigator)
    assert len(trace.steps) <= 1


@pytest.mark.parametrize('mode', ['memoir', 'random-memory'])
def test_runs_are_deterministic(mode, world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, mode)
    first, banks_a = navigator.run_tour(toy_tour, rng=np.random.default_rng(4))
    second, banks_b = navigator.run_tour(toy_tour, rng=np.random.default_rng(4))
    assert [t.to_records() for t in first] == [t.to_records() for t in second]
    assert banks_a == banks_b


def test_teacher_policy_reaches_the_goal(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    scene = toy_tour.scene
    for episode in toy_tour.episodes:
        trace = navigator.run_episode(scene, episode, MemoryBanks(), policy='teacher',
                                      rng=np.random.default_rng(1))
        assert trace.stopped
        assert trace.path[-1] == episode.goal
        assert nav_metrics(trace, episode, scene)['SPL'] == pytest.approx(1.0)
        assert all(step.target == step.action for step in trace.steps)


def test_non_neighbor_action_walks_the_known_geodesic(world_model, nav_model, retrieval_config):
    scene = line_scene()
    banks = MemoryBanks()
    for v in scene.viewpoints:
        banks.graph.observe(scene, v)
    episodic = EpisodicGraph()
    episodic.visit(0, scene.pooled(0))
    navigator = _navigator(world_model, nav_model, retrieval_config)
    moves = navigator._execute(scene, banks, episodic, 0, 3, goal=4)
    assert [hop for hop, _ in moves] == list(scene.geodesic(0, 3)[1][1:])
    assert all(np.array_equal(obs.pooled, scene.pooled(hop)) for hop, obs in moves)
    assert episodic.category(1) == 'visited' and episodic.category(2) == 'visited'


def test_expert_target_prefers_the_farthest_selectable_node_on_route(world_model, nav_model, retrieval_config):
    scene = line_scene(lengths=(1.0,) * 5)
    banks = MemoryBanks()
    for v in scene.viewpoints:
        banks.graph.observe(scene, v)
    navigator = _navigator(world_model, nav_model, retrieval_config)
    rng = np.random.default_rng(0)

    def decision(final):
        return SimpleNamespace(candidates=[STOP, 1, 3, 4], final=np.array(final))

    assert navigator.expert_target(scene, banks, decision([0.0, 5.0, 0.0, 0.0]), 2, 5, rng) == 4
    assert navigator.expert_target(scene, banks, decision([0.0, 5.0, 0.0, -np.inf]), 2, 5, rng) == 3
    assert navigator.expert_target(scene, banks, decision([0.0, 0.0, 0.0, 0.0]), 2, 1, rng) == 1
    assert navigator.expert_target(scene, banks, decision([0.0, 0.0, 0.0, 0.0]), 5, 5, rng) == STOP


def test_expert_target_ignores_nodes_off_every_shortest_route(world_model, nav_model, retrieval_config):
    # 0-1-2 plus a long detour 0-3-2
    graph = nx.Graph()
    for a, b, length in ((0, 1, 1.0), (1, 2, 1.0), (0, 3, 5.0), (3, 2, 5.0)):
        graph.add_edge(a, b, length=length)
    positions = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [1.0, 3.0]]
    scene = SceneGraph(graph, np.random.default_rng(0).standard_normal((4, 4, FEAT)), positions, seed=0)
    banks = MemoryBanks()
    for v in scene.viewpoints:
        banks.graph.observe(scene, v)
    navigator = _navigator(world_model, nav_model, retrieval_config)
    target = navigator.expert_target(scene, banks, SimpleNamespace(candidates=[STOP, 1, 3], final=np.zeros(3)),
                                     0, 2, np.random.default_rng(0))
    assert target == 1


def test_teacher_policy_jumps_through_banked_memory(world_model, nav_model, retrieval_config):
    scene = line_scene(lengths=(1.0,) * 5)
    state_dim = world_model.cfg.deter_dim + world_model.cfg.stoch_dim
    banks = _split_memory(scene, banked=range(6), state_dim=state_dim)
    episode = Episode(np.zeros(2 * scene.feat_dim), 0, 5, tuple(range(6)), episode_id=0)
    navigator = _navigator(world_model, nav_model, retrieval_config, 'full-memory')
    trace = navigator.run_episode(scene, episode, banks, policy='teacher', rng=np.random.default_rng(0))
    assert trace.stopped
    assert trace.path == list(range(6))
    assert nav_metrics(trace, episode, scene)['SPL'] == pytest.approx(1.0)
    assert any(len(step.hops) > 1 for step in trace.steps)


def test_trace_records_are_json_lines(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    trace = navigate_episode(toy_tour.scene, toy_tour.episodes[0], MemoryBanks(), navigator)
    records = trace.to_records()
    assert len(records) == len(trace.steps)
    for record in records:
        assert record['mode'] == 'memoir' and record['episode'] == trace.episode_id
        assert {'candidates', 'scores', 'weights', 'action', 'horizon', 'retrieved_observations'} <= set(record)
        assert json.loads(json.dumps(record)) == json.loads(dumps_json(record))
    assert records[-1]['action'] == STOP or len(records) == navigator.max_steps


def test_unknown_mode_rejected(world_model, nav_model):
    with pytest.raises(ValueError):
        Navigator(world_model, nav_model, mode='perfect')


def test_episode_at_goal_neighbor(world_model, nav_model, retrieval_config):
    scene = line_scene()
    episode = Episode(np.zeros(2 * scene.feat_dim), 0, 1, (0, 1))
    navigator = _navigator(world_model, nav_model, retrieval_config, max_steps=3)
    trace = navigate_episode(scene, episode, MemoryBanks(), navigator)
    assert trace.steps[0].candidates[0] == STOP
    assert trace.steps[0].viewpoint == 0


def _split_memory(scene, banked, state_dim, past_records=()):
    """Banks from an earlier episode that saw only ``banked``; G^(k) may fall apart."""
    banks = MemoryBanks()
    rng = np.random.default_rng(3)
    for v in banked:
        banks.graph.observe(scene, v)
        banks.add_observation(v, scene.pooled(v))
    for v in past_records:
        banks.add_history(v, rng.standard_normal(state_dim), rng.standard_normal((2, state_dim)), episode_id=99)
    return banks


@pytest.mark.parametrize('mode', ['full-memory', 'random-memory'])
def test_unreachable_memories_are_never_retrieved(mode, world_model, nav_model, retrieval_config):
    scene = line_scene(lengths=(1.0,) * 5)
    state_dim = world_model.cfg.deter_dim + world_model.cfg.stoch_dim
    banks = _split_memory(scene, banked=(1, 4, 5), state_dim=state_dim, past_records=(4, 5))
    assert not banks.graph.graph.has_edge(2, 3)
    episode = Episode(np.zeros(2 * scene.feat_dim), 0, 2, (0, 1, 2), episode_id=0)
    navigator = _navigator(world_model, nav_model, retrieval_config, mode, max_steps=1)
    step = navigator.run_episode(scene, episode, banks, rng=np.random.default_rng(0)).steps[0]
    assert step.retrieved_observations == [1]
    assert step.retrieved_histories == []


@pytest.mark.slow
@pytest.mark.parametrize('mode', ['full-memory', 'random-memory'])
def test_tours_survive_a_split_persistent_graph(mode, world_model, nav_model, retrieval_config):
    from conftest import FEAT
    from scene import generate_scene, generate_tour

    for seed in range(6):
        scene = generate_scene(seed, 24, 3.0, FEAT, 4, 6)
        tour = generate_tour(scene, n_episodes=12, seed=seed)
        navigator = _navigator(world_model, nav_model, retrieval_config, mode)
        traces, _ = navigator.run_tour(tour, rng=np.random.default_rng(seed))
        assert len(traces) == len(tour.episodes)


def test_random_memory_draws_as_many_viewpoints_as_memoir_merges(world_model, nav_model, retrieval_config):
    scene = line_scene(lengths=(1.0,) * 5)
    world_model.cfg.epsilon = -1e9
    state_dim = world_model.cfg.deter_dim + world_model.cfg.stoch_dim
    episode = Episode(np.zeros(2 * scene.feat_dim), 0, 3, (0, 1, 2, 3), episode_id=0)
    retrieved = {}
    for mode in ('memoir', 'random-memory'):
        banks = _split_memory(scene, banked=(2, 3, 4), state_dim=state_dim)
        navigator = _navigator(world_model, nav_model, retrieval_config, mode, max_steps=1)
        step = navigator.run_episode(scene, episode, banks, rng=np.random.default_rng(0)).steps[0]
        assert step.horizon == world_model.cfg.horizon
        retrieved[mode] = step.retrieved_observations
    assert retrieved['memoir'] == [2, 3]
    assert len(retrieved['random-memory']) == 2


# Imitation

def test_zero_learning_rate_keeps_parameters(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    before = nav_model.params.arrays()
    curve = train_imitation(navigator, [toy_tour], lr=0.0, iters=2, seed=0)
    after = nav_model.params.arrays()
    assert len(curve) == 2
    assert all(np.array_equal(before[n], after[n]) for n in before)


def test_imitation_is_reproducible(wm_config, retrieval_config, toy_tour):
    from nav_model import NavModel, NavModelConfig
    from world_model import WorldModel

    def trained():
        nav = NavModel(NavModelConfig(feat_dim=wm_config.feat_dim,
                                      state_dim=wm_config.deter_dim + wm_config.stoch_dim, hidden_dim=8), seed=2)
        navigator = Navigator(WorldModel(wm_config, seed=1), nav, retrieval_config)
        curve = train_imitation(navigator, [toy_tour], lr=0.01, iters=3, seed=7)
        return curve, nav.params.to_bytes()

    assert trained() == trained()


def test_unfrozen_world_model_is_updated(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    before = world_model.params.arrays()
    train_imitation(navigator, [toy_tour], lr=0.01, iters=1, seed=0, freeze_world_model=False,
                    world_model_lr=0.01)
    after = world_model.params.arrays()
    assert any(not np.array_equal(before[n], after[n]) for n in before)


def test_imitation_argument_checks(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    with pytest.raises(ValueError):
        train_imitation(navigator, [], lr=0.01, iters=1)
    with pytest.raises(ValueError):
        train_imitation(navigator, [toy_tour], lr=0.01, iters=1, rollout='dagger')


def test_student_rollout_still_supervises(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config)
    curve = train_imitation(navigator, [toy_tour], lr=0.01, iters=2, seed=0, rollout='student')
    assert all(row['supervised'] >= 1 for row in curve)


def test_agreement_is_a_fraction(world_model, nav_model, retrieval_config, toy_tour):
    value = expert_agreement(_navigator(world_model, nav_model, retrieval_config), [toy_tour])
    assert 0.0 <= value <= 1.0


@pytest.mark.slow
def test_imitation_improves_expert_agreement(world_model, nav_model, retrieval_config, toy_tour):
    navigator = _navigator(world_model, nav_model, retrieval_config, expert_strategy='deterministic')
    before = expert_agreement(navigator, [toy_tour])
    train_imitation(navigator, [toy_tour], lr=0.01, iters=40, seed=0)
    assert expert_agreement(navigator, [toy_tour]) > before
