import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import FEAT
from errors import DivergenceError, ShapeError
from tensor import LOG_STD_MAX, LOG_STD_MIN, check_gradients, no_grad
from world_model import Trajectory, TrajectoryBatch, WorldModel, pretrain, rollout_expert


def _batch(seed=0, lengths=(4, 3), feat_dim=FEAT):
    rng = np.random.default_rng(seed)
    trajectories = [Trajectory(rng.standard_normal((n, feat_dim)), rng.standard_normal(2 * feat_dim),
                               np.abs(rng.standard_normal(n)) * 5.0) for n in lengths]
    return TrajectoryBatch.from_trajectories(trajectories)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru(p, prefix, inputs, hidden):
    reset = _sigmoid(inputs @ p[f'{prefix}.w_r'] + hidden @ p[f'{prefix}.u_r'] + p[f'{prefix}.b_r'])
    update = _sigmoid(inputs @ p[f'{prefix}.w_z'] + hidden @ p[f'{prefix}.u_z'] + p[f'{prefix}.b_z'])
    candidate = np.tanh(inputs @ p[f'{prefix}.w_h'] + (reset * hidden) @ p[f'{prefix}.u_h'] + p[f'{prefix}.b_h'])
    return (1.0 - update) * hidden + update * candidate


def _head(p, head, inputs):
    mean = inputs @ p[f'{head}.w_mean'] + p[f'{head}.b_mean']
    log_std = np.clip(inputs @ p[f'{head}.w_log_std'] + p[f'{head}.b_log_std'], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def _kl(q_mean, q_log_std, p_mean, p_log_std):
    return float(np.sum(p_log_std - q_log_std
                        + 0.5 * (np.exp(2 * (q_log_std - p_log_std)) + (q_mean - p_mean) ** 2 * np.exp(-2 * p_log_std))
                        - 0.5))


def _one_step_objective(model, batch):
    """Filtering ELBO (reward + NCE - KL) recomputed from the raw parameter arrays."""
    cfg = model.cfg
    p = {name: model.params[name].data for name in model.params.names()}
    valid_b, valid_t = np.nonzero(batch.mask > 0)
    pool = batch.features[valid_b, valid_t]
    pool_emb = pool @ p['psi_o.w'] + p['psi_o.b']
    pool_emb /= np.linalg.norm(pool_emb, axis=1, keepdims=True)
    positive = {(b, t): i for i, (b, t) in enumerate(zip(valid_b, valid_t))}
    total = 0.0
    for b in range(len(batch.mask)):
        h, z = np.zeros(cfg.deter_dim), np.zeros(cfg.stoch_dim)
        for t in range(int(batch.mask[b].sum())):
            x = batch.features[b, t]
            h_post = _gru(p, 'posterior_cell', np.concatenate([z, x, batch.instructions[b]]), h)
            post_mean, post_log_std = _head(p, 'posterior', np.concatenate([h_post, x]))
            h_prior = _gru(p, 'prior_cell', z, h)
            prior_mean, prior_log_std = _head(p, 'prior', h_prior)
            kl = _kl(post_mean, post_log_std, prior_mean, prior_log_std)
            full = np.concatenate([h_post, post_mean])
            reward = full @ p['reward.w'] + p['reward.b']
            reward_ll = -0.5 * (reward - batch.rewards[b, t]) ** 2 - 0.5 * math.log(2 * math.pi)
            emb = full @ p['psi_s.w'] + p['psi_s.b']
            logits = pool_emb @ (emb / np.linalg.norm(emb)) / cfg.zeta
            nce = logits[positive[(b, t)]] - (logits.max() + np.log(np.exp(logits - logits.max()).sum()))
            total += reward_ll + nce - kl
            h, z = h_post, post_mean
    return -total / len(batch.mask)


def test_infer_checks_dimensions(world_model):
    state = world_model.initial_state()
    with pytest.raises(ShapeError):
        world_model.infer(state, np.zeros(FEAT + 1), np.zeros(2 * FEAT))


def test_infer_rejects_non_finite(world_model):
    x = np.zeros(FEAT)
    x[0] = np.nan
    with pytest.raises(ValueError):
        world_model.infer(world_model.initial_state(), x, np.zeros(2 * FEAT))


def test_infer_without_rng_is_deterministic(world_model):
    x, instr = np.ones(FEAT), np.ones(2 * FEAT)
    a = world_model.infer(world_model.initial_state(), x, instr)
    b = world_model.infer(world_model.initial_state(), x, instr)
    assert np.array_equal(a.vector(), b.vector())
    assert a.vector().shape == (world_model.cfg.deter_dim + world_model.cfg.stoch_dim,)


def test_imagination_runs_full_horizon_when_far(world_model):
    world_model.params.set('reward.b', 100.0)
    imagined = world_model.imagine(world_model.initial_state())
    assert imagined.horizon == world_model.cfg.horizon
    assert imagined.vectors().shape[0] == world_model.cfg.horizon


def test_imagination_stops_once_goal_is_predicted(world_model):
    world_model.params.set('reward.b', -100.0)
    imagined = world_model.imagine(world_model.initial_state())
    assert imagined.horizon == 1
    assert imagined.predicted_rewards[0] < world_model.cfg.epsilon


def test_imagination_horizon_validated(world_model):
    with pytest.raises(ValueError):
        world_model.imagine(world_model.initial_state(), replace(world_model.cfg, horizon=0))


def test_compatibility_is_scaled_cosine(world_model):
    state = world_model.infer(world_model.initial_state(), np.ones(FEAT), np.ones(2 * FEAT))
    value = world_model.compatibility(state, np.ones(FEAT))
    assert abs(value) <= 1.0 / world_model.cfg.zeta + 1e-12


def test_batch_padding_and_mask():
    batch = _batch(lengths=(4, 2))
    assert batch.features.shape == (2, 4, FEAT)
    assert batch.mask.tolist() == [[1, 1, 1, 1], [1, 1, 0, 0]]


def test_batch_rejects_short_trajectories():
    with pytest.raises(ValueError):
        _batch(lengths=(1, 3))
    with pytest.raises(ValueError):
        TrajectoryBatch.from_trajectories([])


@pytest.mark.parametrize('seed', range(20))
def test_overshooting_with_distance_one_is_the_filtering_elbo(wm_config, seed):
    cfg = replace(wm_config, horizon=1)
    model = WorldModel(cfg, seed=seed)
    batch = _batch(seed, lengths=(2 + seed % 3, 3, 4))
    with no_grad():
        loss, terms = model.overshoot_objective(batch)
    assert loss.item() == pytest.approx(_one_step_objective(model, batch), rel=1e-10, abs=1e-10)
    assert terms['total'] == pytest.approx(loss.item())


def test_overshoot_terms_add_up(world_model):
    with no_grad():
        loss, terms = world_model.overshoot_objective(_batch())
    assert terms['reward'] + terms['nce'] + terms['kl'] == pytest.approx(loss.item())
    assert terms['kl'] >= 0.0


@pytest.mark.parametrize('horizon', [1, 2, 3])
def test_overshoot_gradients_match_finite_differences(wm_config, horizon):
    model = WorldModel(replace(wm_config, horizon=horizon), seed=horizon)
    batch = _batch(horizon, lengths=(4, 3))
    error = check_gradients(lambda: model.overshoot_objective(batch)[0], model.params, max_entries=3,
                            seed=horizon)
    assert error < 1e-3


def test_nce_requires_candidates(world_model):
    with pytest.raises(ValueError):
        world_model.nce_term(np.ones((1, 10)), [0], np.zeros((0, FEAT)))


def test_rollout_expert_reaches_goal(toy_scene, toy_tour):
    episode = toy_tour.episodes[0]
    trajectory, path = rollout_expert(toy_scene, episode, np.random.default_rng(0))
    assert path[0] == episode.start and path[-1] == episode.goal
    assert trajectory.features.shape == (len(path), toy_scene.feat_dim)
    assert trajectory.rewards[-1] == 0.0
    assert toy_scene.path_length(path) == pytest.approx(toy_scene.distance(episode.start, episode.goal))


def test_pretrain_zero_iterations_keeps_initialization(world_model):
    trajectories = [Trajectory(np.ones((3, FEAT)), np.ones(2 * FEAT), np.array([2.0, 1.0, 0.0]))]
    before = world_model.params.arrays()
    assert pretrain(world_model, trajectories, iters=0, lr=0.01) == []
    after = world_model.params.arrays()
    assert all(np.array_equal(before[n], after[n]) for n in before)


def test_pretrain_requires_data(world_model):
    with pytest.raises(ValueError):
        pretrain(world_model, [], iters=1, lr=0.01)


def test_pretrain_reports_divergence(world_model):
    world_model.params.set('reward.b', np.nan)
    trajectories = [Trajectory(np.ones((3, FEAT)), np.ones(2 * FEAT), np.array([2.0, 1.0, 0.0]))]
    with pytest.raises(DivergenceError) as info:
        pretrain(world_model, trajectories, iters=3, lr=0.01)
    assert info.value.iteration == 0
    assert info.value.op == 'reward.b'


@pytest.mark.slow
def test_pretraining_reduces_loss(toy_scene, toy_tour, wm_config):
    rng = np.random.default_rng(0)
    trajectories = [rollout_expert(toy_scene, e, rng)[0] for e in toy_tour.episodes]
    model = WorldModel(wm_config, seed=0)
    curve = pretrain(model, trajectories, iters=60, lr=0.01, batch_size=4)
    first = np.mean([row['total'] for row in curve[:10]])
    last = np.mean([row['total'] for row in curve[-10:]])
    assert last < first


@pytest.mark.slow
def test_pretraining_shrinks_the_prior_posterior_gap(toy_scene, toy_tour, wm_config):
    rng = np.random.default_rng(0)
    trajectories = [rollout_expert(toy_scene, e, rng)[0] for e in toy_tour.episodes]
    model = WorldModel(wm_config, seed=0)
    curve = pretrain(model, trajectories, iters=100, lr=0.01, batch_size=4)
    assert np.mean([row['kl'] for row in curve[-20:]]) < np.mean([row['kl'] for row in curve[:20]])


@pytest.mark.slow
def test_reward_head_learns_a_constant_distance(wm_config):
    rng = np.random.default_rng(0)
    trajectories = [Trajectory(rng.standard_normal((4, FEAT)), rng.standard_normal(2 * FEAT), np.full(4, 3.0))
                    for _ in range(6)]
    model = WorldModel(wm_config, seed=0)
    pretrain(model, trajectories, iters=300, lr=0.02, batch_size=4)
    predictions = []
    with no_grad():
        for trajectory in trajectories:
            state = model.initial_state()
            for x in trajectory.features:
                state = model.infer(state, x, trajectory.instruction)
                predictions.append(model.predict_reward(state))
    assert np.mean(predictions) == pytest.approx(3.0, abs=0.1)


@pytest.mark.slow
def test_pretraining_ranks_matched_observations_first(toy_scene, toy_tour, wm_config):
    from scene import generate_tour

    rng = np.random.default_rng(0)
    model = WorldModel(wm_config, seed=0)
    pretrain(model, [rollout_expert(toy_scene, e, rng)[0] for e in toy_tour.episodes], iters=150, lr=0.01,
             batch_size=4)
    held_out = [rollout_expert(toy_scene, e, rng)[0] for e in generate_tour(toy_scene, n_episodes=4, seed=11).episodes]
    matched, mismatched = [], []
    with no_grad():
        for trajectory in held_out:
            state = model.initial_state()
            for t, x in enumerate(trajectory.features):
                state = model.infer(state, x, trajectory.instruction)
                matched.append(model.compatibility(state, x))
                for other in held_out:
                    for u, y in enumerate(other.features):
                        if other is not trajectory or u != t:
                            mismatched.append(model.compatibility(state, y))
    assert np.mean(matched) > np.mean(mismatched)
