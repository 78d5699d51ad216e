"""The navigation loop over one tour, its memory modes and imitation training."""

from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm

from errors import DivergenceError
from memory import (MatchedPattern, MemoryBanks, RetrievalConfig, merge_histories, merge_observations,
                    retrieve_histories, retrieve_observations, score_matrix, select_histories,
                    select_observations, trace_pattern)
from nav_model import imitation_loss
from scene import STOP, TIE_TOLERANCE, env_step, expert_action
from tensor import grad, no_grad
from topological_map import EpisodicGraph
from world_model import TrajectoryBatch, rollout_expert

MODES = ('memoir', 'no-memory', 'random-memory', 'full-memory', 'oracle-memory')
ROLLOUTS = ('teacher', 'student')
DEFAULT_MAX_STEPS = 15


@dataclass
class StepRecord:
    step: int
    viewpoint: int
    candidates: list
    scores: dict
    weights: list
    action: object
    target: object
    hops: list
    horizon: int
    retrieved_observations: list
    observation_ring: list
    retrieved_histories: list
    skipped_missing: int = 0


@dataclass
class EpisodeTrace:
    episode_id: int
    tour_id: int
    mode: str
    path: list
    steps: list = field(default_factory=list)
    stopped: bool = False

    def to_records(self):
        """One JSON-ready object per decision step."""
        records = []
        for step in self.steps:
            record = asdict(step)
            record.update({'episode': self.episode_id, 'tour': self.tour_id, 'mode': self.mode})
            records.append(record)
        return records


def _pattern_log(pattern):
    return {
        'episode_id': pattern.record.episode_id,
        'step': pattern.record.step,
        'viewpoints': list(pattern.viewpoints),
        'scores': [float(s) for s in pattern.scores],
        'remainder': list(pattern.remainder),
    }


class Navigator:
    """Runs the map, infer, imagine, retrieve, store, score and act loop."""

    def __init__(self, world_model, nav_model, retrieval_cfg=None, mode='memoir',
                 max_steps=DEFAULT_MAX_STEPS, expert_strategy='random'):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
        self.world_model = world_model
        self.nav_model = nav_model
        self.retrieval_cfg = retrieval_cfg or RetrievalConfig()
        self.mode = mode
        self.max_steps = max_steps
        self.expert_strategy = expert_strategy

    # Maps

    def _observe(self, scene, banks, episodic, viewpoint, observation, as_current):
        banks.graph.observe(scene, viewpoint)
        if as_current:
            episodic.visit(viewpoint, observation.pooled)
        else:
            episodic.pass_through(viewpoint, observation.pooled)
        for neighbor, direction in sorted(observation.neighbor_directions.items()):
            episodic.add_frontier(neighbor, observation.views[direction], edge_from=viewpoint)

    def observation_ring(self, banks, current):
        """Viewpoints within the imagination horizon of ``current`` that the bank holds."""
        hops = banks.graph.hop_distances(current, cutoff=self.world_model.cfg.horizon)
        return sorted(v for v, d in hops.items() if d >= 1 and v in banks.observations)

    # Retrieval per mode

    def _unfiltered_pattern(self, banks, record, imagined):
        stored = self.world_model.embed_state_vectors(record.trajectory)
        current = self.world_model.embed_state_vectors(imagined.vectors())
        length = min(len(stored), len(current))
        scores = np.diag(score_matrix(current[:length], stored[:length])).tolist()
        return trace_pattern(banks.history, MatchedPattern(record, scores))

    def _oracle_patterns(self, banks, episode, current):
        teacher = set(episode.teacher_path)
        patterns = []
        for record in banks.history.at(current):
            if record.episode_id == episode.episode_id:
                continue
            prefix = []
            for following in banks.history.subsequent(record, len(record.trajectory)):
                if following.viewpoint not in teacher:
                    break
                prefix.append(following.viewpoint)
            if prefix:
                patterns.append(trace_pattern(banks.history, MatchedPattern(record, [1.0] * len(prefix))))
        patterns.sort(key=lambda p: p.sort_key)
        return patterns[:self.retrieval_cfg.max_patterns]

    def _retrieve(self, banks, episode, episodic, current, imagined, rng):
        cfg, wm = self.retrieval_cfg, self.world_model
        if self.mode == 'no-memory':
            return [], [], 0
        if self.mode == 'memoir':
            found = retrieve_observations(cfg, banks.graph, current, imagined, banks.observations, episodic, wm)
            patterns = retrieve_histories(cfg, banks.graph, current, imagined, banks.history, banks.observations,
                                          episodic, wm, exclude_episode=episode.episode_id)
            return found.viewpoints, patterns, found.skipped_missing

        # G^(k) can split into components; only the one holding ``current`` is walkable.
        reachable = set(banks.graph.hop_distances(current))
        pool = [v for v in banks.observations.viewpoints() if v != current and v in reachable]
        past = [r for r in banks.history.records
                if r.episode_id != episode.episode_id and r.viewpoint in reachable]
        if self.mode == 'random-memory':
            found = select_observations(cfg, banks.graph, current, imagined, banks.observations, wm)
            merged = sum(1 for v in found.viewpoints if v in banks.observations)
            count = min(merged, len(pool))
            chosen = sorted(int(v) for v in rng.choice(pool, size=count, replace=False)) if count else []
            matched = select_histories(cfg, banks.graph, current, imagined, banks.history, wm,
                                       exclude_episode=episode.episode_id)
            picks = rng.choice(len(past), size=min(len(matched), len(past)), replace=False) if past else []
            patterns = [self._unfiltered_pattern(banks, past[i], imagined) for i in sorted(picks)]
        elif self.mode == 'full-memory':
            chosen = pool
            patterns = [self._unfiltered_pattern(banks, record, imagined) for record in past]
        else:
            chosen = sorted(set(self.observation_ring(banks, current)) & set(episode.teacher_path))
            patterns = self._oracle_patterns(banks, episode, current)

        skipped = merge_observations(cfg, banks.graph, banks.observations, episodic, chosen)
        skipped += merge_histories(banks.graph, banks.observations, episodic, patterns)
        return chosen, patterns, skipped

    # Movement

    def _execute(self, scene, banks, episodic, current, action, goal):
        """Walk to ``action``; non-neighbors are reached along the persistent graph.

        Returns ``(viewpoint, observation)`` per hop. Every hop but the last is
        already merged into both graphs as visited.
        """
        if action in scene.neighbors(current):
            route = [action]
        else:
            route = banks.graph.shortest_path(current, action)[1:]
        position = current
        moves = []
        for index, hop in enumerate(route):
            observation, position, _ = env_step(scene, position, hop, goal)
            if index < len(route) - 1:
                self._observe(scene, banks, episodic, position, observation, as_current=False)
            moves.append((position, observation))
        return moves

    def _advance(self, state, observation, instruction):
        """Filter one observation; imagination is skipped when memory is off."""
        wm = self.world_model
        with no_grad():
            state = wm.infer(state, observation.pooled, instruction)
            imagined = None if self.mode == 'no-memory' else wm.imagine(state)
        return state, imagined

    def _store(self, banks, viewpoint, observation, state, imagined, episode_id):
        vector = state.vector()
        trajectory = imagined.vectors() if imagined is not None else np.empty((0, vector.shape[-1]))
        banks.add_observation(viewpoint, observation.pooled)
        banks.add_history(viewpoint, vector, trajectory, episode_id)

    def expert_target(self, scene, banks, decision, current, goal, rng):
        """The expert action lifted to the graph action space.

        A selectable candidate that lies on a shortest route to the goal
        (persistent-graph walk, then scene geodesic) and ends closer to the goal
        than the sampled expert hop replaces that hop; the closest one wins.
        """
        hop = expert_action(scene, current, goal, rng, self.expert_strategy)
        if hop == STOP:
            return STOP
        remaining = scene.distance(current, goal)
        tolerance = TIE_TOLERANCE * max(1.0, remaining)
        known = banks.graph.paths_from(current)
        best, best_left = hop, scene.distance(hop, goal)
        for candidate, score in zip(decision.candidates, decision.final):
            if candidate == STOP or candidate == hop or candidate not in known or not np.isfinite(score):
                continue
            left = scene.distance(candidate, goal)
            if abs(known[candidate][0] + left - remaining) > tolerance:
                continue
            if left < best_left - tolerance:
                best, best_left = candidate, left
        return best

    # Episode

    def run_episode(self, scene, episode, banks, tour_id=0, rng=None, policy='model', on_decision=None):
        """Navigate one episode and update the banks in place.

        ``policy`` is ``model`` (argmax), ``teacher`` (execute the expert action)
        or ``student`` (argmax, still querying the expert for labels).
        ``on_decision(decision, target)`` sees every scored step.
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        nav = self.nav_model
        wants_labels = policy != 'model' or on_decision is not None
        episodic = EpisodicGraph()
        current = episode.start
        trace = EpisodeTrace(episode.episode_id, tour_id, self.mode, [current])
        with no_grad():
            state = self.world_model.initial_state()

        for step in range(self.max_steps):
            observation = scene.observe(current)
            self._observe(scene, banks, episodic, current, observation, as_current=True)
            state, imagined = self._advance(state, observation, episode.instruction)
            ring = self.observation_ring(banks, current)
            retrieved, patterns, skipped = self._retrieve(banks, episode, episodic, current, imagined, rng)

            if self.mode != 'no-memory' and self.retrieval_cfg.complete_observations:
                for viewpoint in episodic.with_category('frontier'):
                    if viewpoint in banks.observations:
                        episodic.set_feature(viewpoint, banks.observations.get(viewpoint))

            self._store(banks, current, observation, state, imagined, episode.episode_id)

            decision = nav.decide(episodic, observation, episode.instruction)
            target = (self.expert_target(scene, banks, decision, current, episode.goal, rng)
                      if wants_labels else None)
            if on_decision is not None:
                on_decision(decision, target)
            action = target if policy == 'teacher' else decision.action()

            record = StepRecord(
                step=step, viewpoint=current, candidates=list(decision.candidates),
                scores=decision.branch_rows(), weights=decision.weights.as_list(), action=action,
                target=target, hops=[], horizon=imagined.horizon if imagined is not None else 0,
                retrieved_observations=list(retrieved),
                observation_ring=ring, retrieved_histories=[_pattern_log(p) for p in patterns],
                skipped_missing=skipped,
            )
            trace.steps.append(record)
            if action == STOP:
                trace.stopped = True
                break
            moves = self._execute(scene, banks, episodic, current, action, episode.goal)
            for hop, hop_observation in moves[:-1]:
                state, imagined = self._advance(state, hop_observation, episode.instruction)
                self._store(banks, hop, hop_observation, state, imagined, episode.episode_id)
            record.hops = [hop for hop, _ in moves]
            trace.path.extend(record.hops)
            current = record.hops[-1]
        return trace

    def run_tour(self, tour, banks=None, rng=None):
        """Every episode of a tour in order, sharing one set of banks."""
        banks = banks if banks is not None else MemoryBanks()
        traces = []
        with no_grad():
            for episode in tour.episodes:
                traces.append(self.run_episode(tour.scene, episode, banks, tour.tour_id, rng))
        return traces, banks


def navigate_episode(scene, episode, banks, navigator, rng=None, tour_id=0):
    """Evaluation run of one episode (argmax actions, no gradients)."""
    with no_grad():
        return navigator.run_episode(scene, episode, banks, tour_id, rng)


def expert_agreement(navigator, tours, seed=0):
    """Top-1 agreement with the expert under teacher forcing, over every episode of every tour."""
    rng = np.random.default_rng(seed)
    outcomes = []

    def compare(decision, target):
        outcomes.append(decision.action() == target)

    with no_grad():
        for tour in tours:
            banks = MemoryBanks()
            for episode in tour.episodes:
                navigator.run_episode(tour.scene, episode, banks, tour.tour_id, rng, policy='teacher',
                                      on_decision=compare)
    return sum(outcomes) / len(outcomes) if outcomes else 0.0


def train_imitation(navigator, tours, lr, iters, seed=0, rollout='teacher', freeze_world_model=True,
                    world_model_lr=1e-3, progress=False):
    """Behavior cloning on expert actions; one episode per iteration.

    Tours are replayed in order with their own banks, which reset when a tour
    wraps around. Returns the curve of (iter, loss, accuracy, supervised).
    """
    if not tours:
        raise ValueError("imitation needs at least one tour")
    if rollout not in ROLLOUTS:
        raise ValueError(f"unknown rollout {rollout!r}; expected one of {', '.join(ROLLOUTS)}")
    rng = np.random.default_rng(seed)
    cursors = [0] * len(tours)
    banks = [MemoryBanks() for _ in tours]
    params = navigator.nav_model.params
    curve = []
    for iteration in tqdm(range(iters), desc="Imitation", disable=not progress):
        index = int(rng.integers(len(tours)))
        tour = tours[index]
        if cursors[index] == 0:
            banks[index] = MemoryBanks()
        episode = tour.episodes[cursors[index]]
        cursors[index] = (cursors[index] + 1) % len(tour.episodes)

        supervised = []

        def collect(decision, target):
            loss = imitation_loss(decision, target)
            if loss is not None:
                supervised.append((loss, decision.action() == target))

        navigator.run_episode(tour.scene, episode, banks[index], tour.tour_id, rng,
                              policy=rollout, on_decision=collect)
        if not supervised:
            curve.append({'iter': iteration, 'loss': float('nan'), 'accuracy': float('nan'), 'supervised': 0})
            continue
        total = sum(loss for loss, _ in supervised) * (1.0 / len(supervised))
        try:
            params.apply_adam(grad(total, params), lr)
        except DivergenceError as e:
            raise DivergenceError(f"imitation diverged at iteration {iteration}: {e}", op=e.op,
                                  iteration=iteration, history=curve[-10:]) from e

        if not freeze_world_model:
            trajectory, _ = rollout_expert(tour.scene, episode, rng, navigator.expert_strategy)
            wm = navigator.world_model
            result = wm.elbo_overshoot_loss(TrajectoryBatch.from_trajectories([trajectory]), rng=rng)
            wm.params.apply_adam(result.gradients, world_model_lr)

        curve.append({
            'iter': iteration,
            'loss': total.item(),
            'accuracy': sum(hit for _, hit in supervised) / len(supervised),
            'supervised': len(supervised),
        })
    return curve
