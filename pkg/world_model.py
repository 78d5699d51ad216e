"""Language-conditioned recurrent state-space world model.

The latent state is split into a deterministic recurrent part ``h`` and a
diagonal-Gaussian stochastic part ``z``. Downstream consumers (the state
embedding, the reward head, the memory banks) always see the concatenation
``[h; z]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from errors import DivergenceError, ShapeError
from scene import STOP, expert_action
from tensor import (DiagGaussian, ParamStore, Tensor, as_tensor, concat, cosine_sim, gaussian_kl, grad,
                    gru_cell, l2_normalize, linear, logsumexp, no_grad, reshape, stack, take)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class WorldModelConfig:
    """Sizes and thresholds of the world model.

    ``deter_dim``/``stoch_dim`` are the recurrent and stochastic sizes,
    ``horizon`` is both the overshooting distance and the maximum
    imagination length, ``epsilon`` the stop threshold in meters and
    ``zeta`` the compatibility temperature.
    """

    feat_dim: int = 16
    instr_dim: int = 32
    deter_dim: int = 32
    stoch_dim: int = 16
    embed_dim: int = 32
    horizon: int = 5
    epsilon: float = 3.0
    zeta: float = 0.1

    def validate(self):
        problems = []
        if self.horizon < 1:
            problems.append(('horizon', 'must be >= 1'))
        if self.epsilon <= 0:
            problems.append(('epsilon', 'must be > 0'))
        if self.zeta <= 0:
            problems.append(('zeta', 'must be > 0'))
        for name in ('feat_dim', 'instr_dim', 'deter_dim', 'stoch_dim', 'embed_dim'):
            if getattr(self, name) < 1:
                problems.append((name, 'must be >= 1'))
        return problems


@dataclass
class LatentState:
    h: Tensor
    dist: DiagGaussian
    z: Tensor

    @property
    def full(self):
        return concat([self.h, self.z], axis=-1)

    def vector(self):
        """The state ``[h; z]`` as a plain array (what the memory banks store)."""
        return np.concatenate([self.h.data, self.z.data], axis=-1)


@dataclass
class ImaginedTrajectory:
    states: list
    predicted_rewards: list
    horizon: int

    def vectors(self):
        return np.stack([s.vector() for s in self.states])


@dataclass
class Trajectory:
    """One expert rollout: pooled features, instruction and distance-to-goal per step."""

    features: np.ndarray
    instruction: np.ndarray
    rewards: np.ndarray


@dataclass
class TrajectoryBatch:
    features: np.ndarray
    instructions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories):
        if not trajectories:
            raise ValueError("empty trajectory batch")
        lengths = [len(t.rewards) for t in trajectories]
        if min(lengths) < 2:
            raise ValueError("every trajectory needs at least 2 steps")
        steps = max(lengths)
        feat_dim = trajectories[0].features.shape[1]
        features = np.zeros((len(trajectories), steps, feat_dim))
        rewards = np.zeros((len(trajectories), steps))
        mask = np.zeros((len(trajectories), steps))
        for b, traj in enumerate(trajectories):
            n = len(traj.rewards)
            features[b, :n] = traj.features
            rewards[b, :n] = traj.rewards
            mask[b, :n] = 1.0
        instructions = np.stack([t.instruction for t in trajectories])
        return cls(features, instructions, rewards, mask)


@dataclass
class ElboResult:
    loss: Tensor
    terms: dict
    gradients: dict = field(default_factory=dict)


class WorldModel:
    """Inference, transition, compatibility and reward heads over one ParamStore."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or WorldModelConfig()
        self.params = ParamStore(seed)
        self._build()

    def _build(self):
        c, p = self.cfg, self.params
        state_dim = c.deter_dim + c.stoch_dim
        cells = (('posterior_cell', c.stoch_dim + c.feat_dim + c.instr_dim), ('prior_cell', c.stoch_dim))
        for prefix, fan_in in cells:
            for gate in ('r', 'z', 'h'):
                p.add(f'{prefix}.w_{gate}', (fan_in, c.deter_dim))
                p.add(f'{prefix}.u_{gate}', (c.deter_dim, c.deter_dim))
                p.add(f'{prefix}.b_{gate}', (c.deter_dim,), zeros=True)
        for head, fan_in in (('prior', c.deter_dim), ('posterior', c.deter_dim + c.feat_dim)):
            p.add(f'{head}.w_mean', (fan_in, c.stoch_dim))
            p.add(f'{head}.b_mean', (c.stoch_dim,), zeros=True)
            p.add(f'{head}.w_log_std', (fan_in, c.stoch_dim), scale=0.1 / math.sqrt(fan_in))
            p.add(f'{head}.b_log_std', (c.stoch_dim,), zeros=True)
        p.add('psi_s.w', (state_dim, c.embed_dim))
        p.add('psi_s.b', (c.embed_dim,), zeros=True)
        p.add('psi_o.w', (c.feat_dim, c.embed_dim))
        p.add('psi_o.b', (c.embed_dim,), zeros=True)
        p.add('reward.w', (state_dim,), scale=0.1 / math.sqrt(state_dim))
        p.add('reward.b', (), zeros=True)

    # State transitions

    def initial_state(self, batch=None):
        shape = () if batch is None else (batch,)
        c = self.cfg
        zeros_z = Tensor(np.zeros(shape + (c.stoch_dim,)))
        dist = DiagGaussian(zeros_z, Tensor(np.zeros(shape + (c.stoch_dim,))))
        return LatentState(Tensor(np.zeros(shape + (c.deter_dim,))), dist, zeros_z)

    def _gaussian(self, head, inputs):
        p = self.params
        return DiagGaussian.from_raw(linear(inputs, p[f'{head}.w_mean'], p[f'{head}.b_mean']),
                                     linear(inputs, p[f'{head}.w_log_std'], p[f'{head}.b_log_std']))

    def infer(self, prev, x, instr, rng=None):
        """Posterior q(z_t | z_{t-1}, x_t, instruction); ``rng=None`` keeps z at the mean."""
        x, instr = as_tensor(x), as_tensor(instr)
        if x.shape[-1] != self.cfg.feat_dim or instr.shape[-1] != self.cfg.instr_dim:
            raise ShapeError(f"infer expects x[{self.cfg.feat_dim}], instr[{self.cfg.instr_dim}]")
        if not (np.isfinite(x.data).all() and np.isfinite(instr.data).all()):
            raise ValueError("infer received non-finite inputs")
        h = gru_cell(concat([prev.z, x, instr], axis=-1), prev.h, self.params, 'posterior_cell')
        dist = self._gaussian('posterior', concat([h, x], axis=-1))
        return LatentState(h, dist, dist.sample(rng))

    def transition(self, prev, rng=None):
        """Instruction-free prior p(z_t | z_{t-1})."""
        if not (np.isfinite(prev.h.data).all() and np.isfinite(prev.z.data).all()):
            raise ValueError("transition received a non-finite state")
        h = gru_cell(prev.z, prev.h, self.params, 'prior_cell')
        dist = self._gaussian('prior', h)
        return LatentState(h, dist, dist.sample(rng))

    # Heads

    def embed_state(self, state_full):
        return linear(state_full, self.params['psi_s.w'], self.params['psi_s.b'])

    def embed_observation(self, x):
        return linear(x, self.params['psi_o.w'], self.params['psi_o.b'])

    def embed_state_vectors(self, vectors):
        """psi_s over plain arrays of ``[h; z]`` rows, no graph."""
        vectors = np.asarray(vectors, dtype=np.float64)
        return vectors @ self.params['psi_s.w'].data + self.params['psi_s.b'].data

    def embed_observation_vectors(self, features):
        features = np.asarray(features, dtype=np.float64)
        return features @ self.params['psi_o.w'].data + self.params['psi_o.b'].data

    def compatibility(self, state, x):
        """f = cos(psi_s([h; z]), psi_o(x)) / zeta."""
        with no_grad():
            a = self.embed_state(state.full).data
            b = self.embed_observation(as_tensor(x)).data
        return cosine_sim(a, b) / self.cfg.zeta

    def reward_tensor(self, state_full):
        return linear(state_full, self.params['reward.w'], self.params['reward.b'])

    def predict_reward(self, state):
        with no_grad():
            return float(self.reward_tensor(state.full).data)

    def imagine(self, start, cfg=None):
        """Roll the prior forward until the predicted distance drops below epsilon or D steps."""
        cfg = cfg or self.cfg
        if cfg.horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        states, rewards = [], []
        with no_grad():
            state = start
            for _ in range(cfg.horizon):
                state = self.transition(state)
                reward = self.predict_reward(state)
                states.append(state)
                rewards.append(reward)
                if reward < cfg.epsilon:
                    break
        return ImaginedTrajectory(states, rewards, len(states))

    def observe_sequence(self, features, instruction):
        """Deterministic posterior states along a sequence of pooled features."""
        with no_grad():
            state = self.initial_state()
            states = []
            for x in features:
                state = self.infer(state, x, instruction)
                states.append(state)
        return states

    # Training objective

    def nce_term(self, state_rows, positive_index, pool_features):
        """Sum over rows of log-softmax of compatibility at the positive observation.

        ``pool_features`` is the candidate set (positives included); row ``i``
        scores its own positive at ``positive_index[i]``.
        """
        if len(pool_features) == 0:
            raise ValueError("NCE needs a non-empty candidate set")
        states = l2_normalize(self.embed_state(state_rows))
        pool = l2_normalize(self.embed_observation(as_tensor(pool_features)))
        logits = (states @ pool.T) * (1.0 / self.cfg.zeta)
        rows = np.arange(logits.shape[0])
        return take(logits, (rows, np.asarray(positive_index))) - logsumexp(logits, axis=1)

    def overshoot_objective(self, batch, cfg=None, rng=None):
        """Negative overshooting ELBO, averaged over trajectories.

        J^(d) scores the (d-1)-step open-loop prior from the filtered posterior
        at t-d+1 with the reward and NCE terms, and the d-step prior from the
        posterior at t-d in the KL term; the zero state stands in for t = -1.
        """
        cfg = cfg or self.cfg
        if cfg.horizon < 1:
            raise ValueError("overshooting distance must be >= 1")
        mask = batch.mask
        n_batch, steps = mask.shape
        if steps < 2 or (mask.sum(axis=1) < 2).any():
            raise ValueError("every trajectory needs at least 2 steps")

        instr = Tensor(batch.instructions)
        state = self.initial_state(n_batch)
        posteriors = []
        for t in range(steps):
            state = self.infer(state, Tensor(batch.features[:, t]), instr, rng)
            posteriors.append(state)

        # Open-loop rollouts from every start s = -1..T-1 at once; row b*(T+1) + s + 1
        span = steps + 1
        zero = self.initial_state(n_batch)
        flat = lambda tensors, dim: reshape(stack(tensors, axis=1), (n_batch * span, dim))
        start = LatentState(
            flat([zero.h] + [p.h for p in posteriors], cfg.deter_dim),
            DiagGaussian(flat([zero.dist.mean] + [p.dist.mean for p in posteriors], cfg.stoch_dim),
                         flat([zero.dist.log_std] + [p.dist.log_std for p in posteriors], cfg.stoch_dim)),
            flat([zero.z] + [p.z for p in posteriors], cfg.stoch_dim),
        )
        rollouts = [start]
        for _ in range(cfg.horizon):
            rollouts.append(self.transition(rollouts[-1], rng))

        post_mean = reshape(stack([p.dist.mean for p in posteriors], axis=1), (n_batch * steps, cfg.stoch_dim))
        post_log_std = reshape(stack([p.dist.log_std for p in posteriors], axis=1),
                               (n_batch * steps, cfg.stoch_dim))

        valid_b, valid_t = np.nonzero(mask > 0)
        pool_index = -np.ones((n_batch, steps), dtype=int)
        pool_index[valid_b, valid_t] = np.arange(len(valid_b))
        pool = batch.features[valid_b, valid_t]

        totals = {'reward': 0.0, 'nce': 0.0, 'kl': 0.0}
        objective = Tensor(0.0)
        for d in range(1, cfg.horizon + 1):
            weight = 1.0 if d == 1 else 1.0 / (cfg.horizon - 1)

            # Reward and NCE on the (d-1)-step prior for targets t >= d-1
            keep = valid_t >= d - 1
            b_sel, t_sel = valid_b[keep], valid_t[keep]
            rows = b_sel * span + (t_sel - d + 1) + 1
            states = rollouts[d - 1]
            full = concat([take(states.h, rows), take(states.z, rows)], axis=-1)
            error = self.reward_tensor(full) - Tensor(batch.rewards[b_sel, t_sel])
            reward_ll = (-0.5 * (error * error) - _HALF_LOG_2PI).sum()
            nce = self.nce_term(full, pool_index[b_sel, t_sel], pool).sum()

            # KL between the posterior at t and the d-step prior from t-d
            keep = valid_t >= d - 1
            b_kl, t_kl = valid_b[keep], valid_t[keep]
            prior_rows = b_kl * span + (t_kl - d) + 1
            prior = rollouts[d].dist
            q = DiagGaussian(take(post_mean, b_kl * steps + t_kl), take(post_log_std, b_kl * steps + t_kl))
            p = DiagGaussian(take(prior.mean, prior_rows), take(prior.log_std, prior_rows))
            kl = gaussian_kl(q, p)

            objective = objective + weight * (reward_ll + nce - kl)
            totals['reward'] += weight * reward_ll.item()
            totals['nce'] += weight * nce.item()
            totals['kl'] += weight * kl.item()

        loss = objective * (-1.0 / n_batch)
        terms = {
            'reward': -totals['reward'] / n_batch,
            'nce': -totals['nce'] / n_batch,
            'kl': totals['kl'] / n_batch,
        }
        terms['total'] = loss.item()
        return loss, terms

    def elbo_overshoot_loss(self, batch, cfg=None, rng=None):
        """Loss and reverse-mode gradients for one batch."""
        loss, terms = self.overshoot_objective(batch, cfg, rng)
        return ElboResult(loss, terms, grad(loss, self.params))


def rollout_expert(scene, episode, rng, strategy='random', max_steps=None):
    """Follow the expert from start to goal; returns the trajectory and the visited path."""
    limit = max_steps or 4 * len(scene.viewpoints)
    current, path = episode.start, [episode.start]
    for _ in range(limit):
        action = expert_action(scene, current, episode.goal, rng, strategy)
        if action == STOP:
            break
        current = action
        path.append(current)
    features = np.stack([scene.pooled(v) for v in path])
    rewards = np.array([scene.distance(v, episode.goal) for v in path])
    return Trajectory(features, np.asarray(episode.instruction), rewards), path


def pretrain(model, trajectories, iters, lr, cfg=None, batch_size=8, seed=0, progress=False):
    """Minimise the overshooting loss with Adam; returns the loss curve.

    Raises ``DivergenceError`` with the recent curve if a loss goes non-finite.
    """
    if not trajectories:
        raise ValueError("pretraining needs at least one trajectory")
    cfg = cfg or model.cfg
    rng = np.random.default_rng(seed)
    curve = []
    for iteration in tqdm(range(iters), desc="Pretraining world model", disable=not progress):
        picks = rng.choice(len(trajectories), size=min(batch_size, len(trajectories)), replace=False)
        batch = TrajectoryBatch.from_trajectories([trajectories[i] for i in sorted(picks.tolist())])
        try:
            result = model.elbo_overshoot_loss(batch, cfg, rng)
        except DivergenceError as e:
            raise DivergenceError(f"world model diverged at iteration {iteration}: {e}",
                                  op=e.op, iteration=iteration, history=curve[-10:]) from e
        model.params.apply_adam(result.gradients, lr)
        curve.append({'iter': iteration, **result.terms})
    return curve
