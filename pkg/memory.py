"""Hybrid viewpoint-level memory: persistent graph, observation bank and history bank.

Banks are owned by one tour runner. The retrieval functions only read the
banks and the persistent graph; they write into the episodic graph they are
given.
"""

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from errors import ShapeError, SnapshotError, UnknownViewpointError
from file_handler import pack_container, unpack_container
from scene import shortest_paths_from
from tensor import cosine_sim

MEMORY_KIND = 'memory'


@dataclass
class RetrievalConfig:
    """Observation retrieval keeps at most ``width`` (W) targets per imagination
    step after the percentile filter ``1 - rho_o * gamma_o**(i-1)``. History
    retrieval matches while scores stay above ``theta_h * gamma_h**(i-1)`` and
    keeps ``max_patterns`` (P) patterns.
    """

    width: int = 12
    rho_o: float = 0.2
    gamma_o: float = 0.8
    theta_h: float = 0.2
    gamma_h: float = 0.8
    max_patterns: int = 10
    include_neighbors: bool = True
    complete_observations: bool = True

    def validate(self):
        problems = []
        if self.width < 1:
            problems.append(('width', 'must be >= 1'))
        if self.max_patterns < 1:
            problems.append(('max_patterns', 'must be >= 1'))
        for name in ('rho_o', 'theta_h'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append((name, 'must be in [0, 1]'))
        for name in ('gamma_o', 'gamma_h'):
            if not 0.0 < getattr(self, name) <= 1.0:
                problems.append((name, 'must be in (0, 1]'))
        return problems


class PersistentGraph:
    """Viewpoints and edges observed so far in a tour. Only ever grows."""

    def __init__(self):
        self.graph = nx.Graph()
        self._paths = {}

    def __contains__(self, viewpoint):
        return viewpoint in self.graph

    def __len__(self):
        return self.graph.number_of_nodes()

    def __eq__(self, other):
        if not isinstance(other, PersistentGraph):
            return NotImplemented
        return self.viewpoints() == other.viewpoints() and self.edges() == other.edges()

    def viewpoints(self):
        return sorted(self.graph.nodes)

    def edges(self):
        return sorted((min(a, b), max(a, b), d['length']) for a, b, d in self.graph.edges(data=True))

    def neighbors(self, viewpoint):
        self.require(viewpoint)
        return sorted(self.graph.neighbors(viewpoint))

    def require(self, viewpoint):
        if viewpoint not in self.graph:
            raise UnknownViewpointError(f"viewpoint {viewpoint} is not in the persistent graph")

    def add_viewpoint(self, viewpoint):
        if viewpoint not in self.graph:
            self.graph.add_node(viewpoint)
            self._paths.clear()

    def add_edge(self, a, b, length):
        if not self.graph.has_edge(a, b):
            self.graph.add_edge(a, b, length=float(length))
            self._paths.clear()

    def observe(self, scene, viewpoint):
        """Add a visited viewpoint together with every edge to its true neighbors."""
        self.add_viewpoint(viewpoint)
        for neighbor in scene.neighbors(viewpoint):
            self.add_edge(viewpoint, neighbor, scene.edge_length(viewpoint, neighbor))

    def hop_distances(self, source, cutoff=None):
        self.require(source)
        return nx.single_source_shortest_path_length(self.graph, source, cutoff=cutoff)

    def paths_from(self, source):
        """Length-weighted shortest paths from ``source``; ties go to the smallest sequence."""
        self.require(source)
        if source not in self._paths:
            self._paths[source] = shortest_paths_from(self.graph, source)
        return self._paths[source]

    def shortest_path(self, source, target):
        paths = self.paths_from(source)
        if target not in paths:
            raise UnknownViewpointError(f"viewpoint {target} is unreachable from {source}")
        return list(paths[target][1])


class ObservationBank:
    """Pooled feature per visited viewpoint, averaged over revisits."""

    def __init__(self):
        self.features = {}
        self.counts = {}

    def __contains__(self, viewpoint):
        return viewpoint in self.features

    def __len__(self):
        return len(self.features)

    def __eq__(self, other):
        if not isinstance(other, ObservationBank):
            return NotImplemented
        return (self.counts == other.counts
                and all(np.array_equal(self.features[v], other.features[v]) for v in self.features))

    def viewpoints(self):
        return sorted(self.features)

    def get(self, viewpoint):
        if viewpoint not in self.features:
            raise UnknownViewpointError(f"viewpoint {viewpoint} has no stored observation")
        return self.features[viewpoint]

    def add(self, viewpoint, feature):
        feature = np.asarray(feature, dtype=np.float64)
        if not np.isfinite(feature).all():
            raise ValueError(f"non-finite observation for viewpoint {viewpoint}")
        count = self.counts.get(viewpoint, 0)
        if count:
            if feature.shape != self.features[viewpoint].shape:
                raise ShapeError(f"viewpoint {viewpoint}: feature shape changed to {feature.shape}")
            feature = (self.features[viewpoint] * count + feature) / (count + 1)
        self.features[viewpoint] = feature.copy()
        self.counts[viewpoint] = count + 1


@dataclass(eq=False)
class HistoryRecord:
    viewpoint: int
    state: np.ndarray
    trajectory: np.ndarray
    episode_id: int
    step: int

    def same_as(self, other):
        return (self.viewpoint == other.viewpoint and self.episode_id == other.episode_id
                and self.step == other.step and np.array_equal(self.state, other.state)
                and np.array_equal(self.trajectory, other.trajectory))


class HistoryBank:
    """Inferred states and imagined trajectories, indexed by viewpoint and by episode."""

    def __init__(self):
        self.by_viewpoint = {}
        self.by_episode = {}
        self.records = []

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, HistoryBank):
            return NotImplemented
        return (len(self.records) == len(other.records)
                and all(a.same_as(b) for a, b in zip(self.records, other.records)))

    def viewpoints(self):
        return sorted(self.by_viewpoint)

    def at(self, viewpoint):
        return list(self.by_viewpoint.get(viewpoint, ()))

    def visit_count(self, viewpoint):
        return len(self.by_viewpoint.get(viewpoint, ()))

    def add(self, viewpoint, state, trajectory, episode_id, step=None):
        state = np.asarray(state, dtype=np.float64)
        trajectory = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
        if trajectory.shape[1] != state.shape[-1]:
            raise ShapeError(f"trajectory states {trajectory.shape[1]} != state size {state.shape[-1]}")
        episode = self.by_episode.setdefault(episode_id, [])
        record = HistoryRecord(viewpoint, state.copy(), trajectory.copy(), episode_id,
                               len(episode) if step is None else step)
        episode.append(record)
        self.by_viewpoint.setdefault(viewpoint, []).append(record)
        self.records.append(record)
        return record

    def subsequent(self, record, count=None):
        """Records the same episode produced after ``record``."""
        episode = self.by_episode[record.episode_id]
        position = episode.index(record)
        tail = episode[position + 1:]
        return tail if count is None else tail[:count]


class MemoryBanks:
    """Everything that persists across the episodes of one tour."""

    def __init__(self):
        self.graph = PersistentGraph()
        self.observations = ObservationBank()
        self.history = HistoryBank()

    def __eq__(self, other):
        if not isinstance(other, MemoryBanks):
            return NotImplemented
        return (self.graph == other.graph and self.observations == other.observations
                and self.history == other.history)

    def add_observation(self, viewpoint, feature):
        self.graph.require(viewpoint)
        self.observations.add(viewpoint, feature)

    def add_history(self, viewpoint, state, trajectory, episode_id, step=None):
        self.graph.require(viewpoint)
        return self.history.add(viewpoint, state, trajectory, episode_id, step)

    def to_bytes(self):
        return snapshot(self)

    @classmethod
    def from_bytes(cls, payload):
        return restore(payload)


# Scoring

def _vectors(states):
    """Stack LatentStates, ImaginedTrajectories or arrays into an (n, d) array."""
    if hasattr(states, 'vectors'):
        return states.vectors()
    if hasattr(states, 'vector'):
        return states.vector()[None, :]
    array = np.asarray(states, dtype=np.float64)
    return array[None, :] if array.ndim == 1 else array


def _unit_rows(embeddings):
    norms = np.linalg.norm(embeddings, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot score a zero embedding vector")
    return embeddings / norms


def score_matrix(left, right):
    """0.5 * (cos + 1) between every row pair, clipped to [0, 1]."""
    cos = _unit_rows(np.atleast_2d(left)) @ _unit_rows(np.atleast_2d(right)).T
    return np.clip(0.5 * (cos + 1.0), 0.0, 1.0)


def score_obs(model, state, feature):
    """Compatibility of an imagined state with a stored observation, in [0, 1]."""
    a = model.embed_state_vectors(_vectors(state)[0])
    b = model.embed_observation_vectors(np.asarray(feature, dtype=np.float64))
    return 0.5 * (cosine_sim(a, b) + 1.0)


def score_hist(model, state_a, state_b):
    """Compatibility of two imagined states, both through the state embedding."""
    a = model.embed_state_vectors(_vectors(state_a)[0])
    b = model.embed_state_vectors(_vectors(state_b)[0])
    return 0.5 * (cosine_sim(a, b) + 1.0)


def retention_count(ring_size, step, cfg):
    """Survivors of the percentile filter at imagination step ``step`` (1-based)."""
    fraction = 1.0 - cfg.rho_o * cfg.gamma_o ** (step - 1)
    return min(ring_size, max(1, math.ceil(fraction * ring_size)))


def history_threshold(step, cfg):
    return cfg.theta_h * cfg.gamma_h ** (step - 1)


# Observation retrieval

@dataclass
class ObservationRetrieval:
    viewpoints: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    skipped_missing: int = 0


def select_observations(cfg, graph, current, trajectory, observations, model):
    """Ring-by-ring selection; returns retrieved viewpoints without touching G_t.

    Ring ``i`` holds viewpoints at hop distance ``i`` from ``current``. Ring
    members without a stored observation cannot be scored and are counted in
    ``skipped_missing``.
    """
    graph.require(current)
    states = _vectors(trajectory)
    if len(states) == 0:
        raise ValueError("imagined trajectory is empty")
    result = ObservationRetrieval()
    if len(observations) == 0:
        return result

    hops = graph.hop_distances(current, cutoff=len(states))
    state_embeddings = model.embed_state_vectors(states)
    retrieved = set()
    for step in range(1, len(states) + 1):
        ring = sorted(v for v, d in hops.items() if d == step)
        scored = [v for v in ring if v in observations]
        result.skipped_missing += len(ring) - len(scored)
        if not scored:
            result.targets.append([])
            continue
        features = np.stack([observations.get(v) for v in scored])
        scores = score_matrix(state_embeddings[step - 1], model.embed_observation_vectors(features))[0]
        order = sorted(range(len(scored)), key=lambda k: (-scores[k], scored[k]))
        kept = order[:retention_count(len(scored), step, cfg)][:cfg.width]
        targets = [scored[k] for k in kept]
        result.targets.append(targets)
        for target in targets:
            retrieved.update(graph.shortest_path(current, target)[1:])
    result.viewpoints = sorted(retrieved)
    return result


def merge_observations(cfg, graph, observations, episodic, viewpoints):
    """Merge viewpoints, their stored features and their persistent edges into G_t.

    Returns how many viewpoints were skipped for lack of a stored observation.
    """
    skipped = 0
    merged = []
    for viewpoint in viewpoints:
        if viewpoint not in observations:
            skipped += 1
            continue
        episodic.add_retrieved(viewpoint, observations.get(viewpoint))
        merged.append(viewpoint)
    if cfg.include_neighbors:
        for viewpoint in merged:
            for neighbor in graph.neighbors(viewpoint):
                if neighbor in observations and neighbor not in episodic:
                    episodic.add_retrieved(neighbor, observations.get(neighbor))
    episodic.connect_from(graph)
    return skipped


def retrieve_observations(cfg, graph, current, trajectory, observations, episodic, model):
    """Imagination-guided observation retrieval into ``episodic``."""
    result = select_observations(cfg, graph, current, trajectory, observations, model)
    result.skipped_missing += merge_observations(cfg, graph, observations, episodic, result.viewpoints)
    result.viewpoints = [v for v in result.viewpoints if v in observations]
    return result


# History retrieval

@dataclass
class MatchedPattern:
    record: HistoryRecord
    scores: list
    viewpoints: list = field(default_factory=list)
    states: list = field(default_factory=list)
    remainder: list = field(default_factory=list)

    @property
    def sort_key(self):
        return (-len(self.scores), -min(self.scores), self.record.episode_id, self.record.step)


def match_pattern(cfg, trajectory_embeddings, record, model):
    """Step-wise matching of the current imagination against a stored one."""
    stored = model.embed_state_vectors(record.trajectory)
    length = min(len(trajectory_embeddings), len(stored))
    if length == 0:
        return []
    scores = np.diag(score_matrix(trajectory_embeddings[:length], stored[:length]))
    matched = []
    for step, score in enumerate(scores, start=1):
        if score < history_threshold(step, cfg):
            break
        matched.append(float(score))
    return matched


def trace_pattern(history, pattern):
    """Fill in the viewpoints and inferred states the past episode visited next."""
    following = history.subsequent(pattern.record)
    pattern.viewpoints = [r.viewpoint for r in following[:len(pattern.scores)]]
    pattern.states = [r.state for r in following[:len(pattern.scores)]]
    pattern.remainder = [r.viewpoint for r in following]
    return pattern


def select_histories(cfg, graph, current, trajectory, history, model, exclude_episode=None):
    """Matched, ranked and traced patterns stored at ``current`` (top P)."""
    graph.require(current)
    records = [r for r in history.at(current) if r.episode_id != exclude_episode]
    if not records:
        return []
    embeddings = model.embed_state_vectors(_vectors(trajectory))
    patterns = []
    for record in records:
        scores = match_pattern(cfg, embeddings, record, model)
        if scores:
            patterns.append(MatchedPattern(record, scores))
    patterns.sort(key=lambda p: p.sort_key)
    return [trace_pattern(history, p) for p in patterns[:cfg.max_patterns]]


def merge_histories(graph, observations, episodic, patterns):
    """Attach (state, score) pairs to traced viewpoints, merging unseen ones into G_t."""
    skipped = 0
    for pattern in patterns:
        for viewpoint, state, score in zip(pattern.viewpoints, pattern.states, pattern.scores):
            if viewpoint not in episodic:
                if viewpoint not in observations:
                    skipped += 1
                    continue
                episodic.add_retrieved(viewpoint, observations.get(viewpoint))
            episodic.attach(viewpoint, state, score)
    episodic.connect_from(graph)
    return skipped


def retrieve_histories(cfg, graph, current, trajectory, history, observations, episodic, model,
                       exclude_episode=None):
    """Imagination-matched history retrieval into ``episodic``."""
    patterns = select_histories(cfg, graph, current, trajectory, history, model, exclude_episode)
    merge_histories(graph, observations, episodic, patterns)
    return patterns


# Snapshots

def snapshot(banks):
    """Serialize the banks and the persistent graph into the binary container."""
    arrays = {}
    for viewpoint in banks.observations.viewpoints():
        arrays[f'obs/{viewpoint}'] = banks.observations.features[viewpoint]
    records = []
    for index, record in enumerate(banks.history.records):
        arrays[f'hist/{index}/state'] = record.state
        arrays[f'hist/{index}/trajectory'] = record.trajectory
        records.append([record.viewpoint, record.episode_id, record.step])
    manifest = {
        'kind': MEMORY_KIND,
        'viewpoints': banks.graph.viewpoints(),
        'edges': [[a, b, length] for a, b, length in banks.graph.edges()],
        'observation_counts': [[v, banks.observations.counts[v]] for v in banks.observations.viewpoints()],
        'history_records': records,
    }
    return pack_container(manifest, arrays)


def restore(payload):
    manifest, arrays = unpack_container(payload)
    if manifest.get('kind') != MEMORY_KIND:
        raise SnapshotError(f"expected a memory snapshot, got {manifest.get('kind')!r}")
    banks = MemoryBanks()
    try:
        for viewpoint in manifest['viewpoints']:
            banks.graph.add_viewpoint(viewpoint)
        for a, b, length in manifest['edges']:
            banks.graph.add_edge(a, b, length)
        for viewpoint, count in manifest['observation_counts']:
            banks.observations.features[viewpoint] = arrays[f'obs/{viewpoint}'].copy()
            banks.observations.counts[viewpoint] = count
        for index, (viewpoint, episode_id, step) in enumerate(manifest['history_records']):
            banks.history.add(viewpoint, arrays[f'hist/{index}/state'], arrays[f'hist/{index}/trajectory'],
                              episode_id, step)
    except (KeyError, ValueError, TypeError) as e:
        raise SnapshotError(f"corrupt payload: {e}") from e
    return banks
