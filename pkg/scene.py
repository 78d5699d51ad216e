"""Procedural viewpoint-graph scenes, tours, the environment step and the expert."""

import heapq
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from errors import GenerationError, IllegalMoveError, UnknownViewpointError

STOP = 'STOP'
SUCCESS_RADIUS = 3.0
MIN_EDGE_LENGTH = 1.0
MAX_EDGE_LENGTH = 10.0
TIE_TOLERANCE = 1e-9
SCENE_SCHEMA_VERSION = 1


def shortest_paths_from(graph, source, weight='length'):
    """Dijkstra from ``source`` returning ``{node: (distance, path)}``.

    Among equal-length paths the lexicographically smallest viewpoint
    sequence wins, so results never depend on adjacency iteration order.
    """
    if source not in graph:
        raise UnknownViewpointError(source)
    best = {source: (0.0, (source,))}
    frontier = [(0.0, (source,))]
    settled = set()
    while frontier:
        distance, path = heapq.heappop(frontier)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        for neighbor, attrs in graph[node].items():
            if neighbor in settled:
                continue
            candidate = (distance + attrs[weight], path + (neighbor,))
            if neighbor not in best or candidate < best[neighbor]:
                best[neighbor] = candidate
                heapq.heappush(frontier, candidate)
    return {node: (distance, list(path)) for node, (distance, path) in best.items()}


@dataclass(frozen=True, eq=False)
class Observation:
    """What the agent perceives at one viewpoint."""

    viewpoint: int
    views: np.ndarray
    pooled: np.ndarray
    neighbor_directions: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Episode:
    instruction: np.ndarray
    start: int
    goal: int
    teacher_path: tuple
    episode_id: int = 0


@dataclass(frozen=True, eq=False)
class Tour:
    scene: 'SceneGraph'
    episodes: tuple
    tour_id: int = 0


class SceneGraph:
    """Weighted undirected viewpoint graph with K directional features per viewpoint."""

    def __init__(self, graph, features, positions, seed, params=None):
        self.graph = nx.freeze(graph)
        self.features = np.array(features, dtype=np.float64)
        self.positions = np.array(positions, dtype=np.float64)
        self.features.setflags(write=False)
        self.positions.setflags(write=False)
        self.seed = int(seed)
        self.params = dict(params or {})
        self._paths = {}
        self._directions = {}
        self.pooled_features = self.features.mean(axis=1)
        self.pooled_features.setflags(write=False)

    def __contains__(self, viewpoint):
        return viewpoint in self.graph

    @property
    def viewpoints(self):
        return sorted(self.graph.nodes)

    @property
    def edges(self):
        return sorted((min(a, b), max(a, b), float(d['length'])) for a, b, d in self.graph.edges(data=True))

    @property
    def view_count(self):
        return self.features.shape[1]

    @property
    def feat_dim(self):
        return self.features.shape[2]

    def require(self, viewpoint):
        if viewpoint not in self.graph:
            raise UnknownViewpointError(viewpoint)

    def neighbors(self, viewpoint):
        self.require(viewpoint)
        return sorted(self.graph.neighbors(viewpoint))

    def edge_length(self, a, b):
        return float(self.graph[a][b]['length'])

    def pooled(self, viewpoint):
        self.require(viewpoint)
        return self.pooled_features[viewpoint]

    def direction_index(self, viewpoint, neighbor):
        """View index i_j pointing from ``viewpoint`` toward ``neighbor``."""
        key = (viewpoint, neighbor)
        if key not in self._directions:
            self._directions[key] = heading_index(self.positions[viewpoint], self.positions[neighbor],
                                                  self.view_count)
        return self._directions[key]

    def observe(self, viewpoint):
        self.require(viewpoint)
        directions = {n: self.direction_index(viewpoint, n) for n in self.neighbors(viewpoint)}
        return Observation(viewpoint, self.features[viewpoint], self.pooled_features[viewpoint], directions)

    def paths_from(self, source):
        if source not in self._paths:
            self._paths[source] = shortest_paths_from(self.graph, source)
        return self._paths[source]

    def distance(self, a, b):
        return self.geodesic(a, b)[0]

    def geodesic(self, a, b):
        """Exact shortest path by edge length, lexicographic tie-break."""
        self.require(a)
        self.require(b)
        table = self.paths_from(a)
        assert b in table, "scene graphs are connected"
        distance, path = table[b]
        return distance, list(path)

    def path_length(self, path):
        return float(sum(self.edge_length(a, b) for a, b in zip(path[:-1], path[1:])))


def heading_index(origin, target, view_count):
    angle = math.atan2(target[1] - origin[1], target[0] - origin[0]) % (2.0 * math.pi)
    return int(angle / (2.0 * math.pi / view_count)) % view_count


def generate_scene(seed, n, avg_degree=3.0, feat_dim=16, view_count=8, max_degree=None):
    """Random connected scene: spatial spanning tree plus short extra edges."""
    if n < 2:
        raise GenerationError(f"n={n}: at least two viewpoints are needed for a connected graph")
    if n < 4:
        raise GenerationError(f"n={n}: scenes need at least 4 viewpoints")
    if avg_degree < 2:
        raise GenerationError(f"avg_degree={avg_degree} must be >= 2")
    if feat_dim < 4:
        raise GenerationError(f"feat_dim={feat_dim} must be >= 4")
    if view_count < 1:
        raise GenerationError(f"view_count={view_count} must be >= 1")
    if max_degree is None:
        max_degree = max(4, int(math.ceil(2 * avg_degree)))
    max_degree = min(max_degree, n - 1)
    if max_degree < 2:
        raise GenerationError(f"max_degree={max_degree} must be >= 2")

    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 2))
    graph = nx.Graph()
    graph.add_nodes_from(range(n))

    # Spanning tree: attach each node to its nearest placed node with spare degree
    order = rng.permutation(n).tolist()
    for k in range(1, n):
        node = order[k]
        placed = [p for p in order[:k] if graph.degree[p] < max_degree]
        parent = min(placed, key=lambda p: (float(np.linalg.norm(positions[p] - positions[node])), p))
        graph.add_edge(node, parent)

    # Extra edges favour short spatial hops
    target_edges = int(round(n * avg_degree / 2.0))
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if not graph.has_edge(i, j)]
    jitter = rng.uniform(0.5, 1.5, size=len(candidates))
    ranked = sorted(range(len(candidates)),
                    key=lambda c: (float(np.linalg.norm(positions[candidates[c][0]] - positions[candidates[c][1]]))
                                   * jitter[c], c))
    for c in ranked:
        if graph.number_of_edges() >= target_edges:
            break
        i, j = candidates[c]
        if graph.degree[i] < max_degree and graph.degree[j] < max_degree:
            graph.add_edge(i, j)

    for a, b in sorted((min(a, b), max(a, b)) for a, b in graph.edges):
        graph[a][b]['length'] = float(rng.uniform(MIN_EDGE_LENGTH, MAX_EDGE_LENGTH))

    base = rng.standard_normal((n, feat_dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    features = np.zeros((n, view_count, feat_dim))
    for v in range(n):
        toward = {}
        for neighbor in sorted(graph.neighbors(v)):
            toward.setdefault(heading_index(positions[v], positions[neighbor], view_count), []).append(neighbor)
        for i in range(view_count):
            vector = 0.5 * base[v] + 0.3 * rng.standard_normal(feat_dim)
            for neighbor in toward.get(i, []):
                vector = vector + base[neighbor]
            features[v, i] = vector / np.linalg.norm(vector)

    params = {'n': n, 'avg_degree': avg_degree, 'feat_dim': feat_dim,
              'view_count': view_count, 'max_degree': max_degree}
    return SceneGraph(graph, features, positions, seed, params)


def generate_tour(scene, n_episodes, seed, noise=0.1, tour_id=0):
    """Distinct (start, goal) episodes at least two edges apart, in generation order."""
    if n_episodes < 1:
        raise GenerationError(f"n_episodes={n_episodes} must be >= 1")
    pairs = []
    for start in scene.viewpoints:
        table = scene.paths_from(start)
        for goal in scene.viewpoints:
            if goal != start and len(table[goal][1]) >= 3:
                pairs.append((start, goal))
    if len(pairs) < n_episodes:
        raise GenerationError(
            f"scene has {len(pairs)} eligible (start, goal) pairs, {n_episodes} episodes requested"
        )

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=n_episodes, replace=False).tolist()
    episodes = []
    for index, pair_index in enumerate(chosen):
        start, goal = pairs[pair_index]
        _, path = scene.geodesic(start, goal)
        path_mean = np.mean([scene.pooled(v) for v in path], axis=0)
        noisy = path_mean + noise * rng.standard_normal(scene.feat_dim)
        instruction = np.concatenate([scene.pooled(goal), noisy])
        instruction.setflags(write=False)
        episodes.append(Episode(instruction, start, goal, tuple(path), index))
    return Tour(scene, tuple(episodes), tour_id)


def env_step(scene, current, action, goal):
    """Apply one action; returns (observation, new viewpoint, distance to goal)."""
    scene.require(current)
    if action == STOP:
        new_vp = current
    elif action in scene.graph[current]:
        new_vp = action
    else:
        raise IllegalMoveError(f"{action} is not adjacent to {current}")
    return scene.observe(new_vp), new_vp, scene.distance(new_vp, goal)


def optimal_first_hops(scene, current, goal):
    """Neighbors of ``current`` lying on some shortest path to ``goal``."""
    to_goal = scene.paths_from(goal)
    remaining = to_goal[current][0]
    tolerance = TIE_TOLERANCE * max(1.0, remaining)
    return [n for n in scene.neighbors(current)
            if abs(scene.edge_length(current, n) + to_goal[n][0] - remaining) <= tolerance]


def expert_action(scene, current, goal, rng, strategy='random'):
    """Next hop toward ``goal``; ``random`` samples uniformly among optimal hops."""
    scene.require(current)
    scene.require(goal)
    if current == goal:
        return STOP
    if strategy == 'deterministic':
        return scene.geodesic(current, goal)[1][1]
    options = optimal_first_hops(scene, current, goal)
    return options[int(rng.integers(len(options)))]


def geodesic(scene, a, b):
    return scene.geodesic(a, b)


def scene_to_document(scene, tours=()):
    return {
        'version': SCENE_SCHEMA_VERSION,
        'seed': scene.seed,
        'params': scene.params,
        'nodes': [{'id': v, 'position': scene.positions[v].tolist()} for v in scene.viewpoints],
        'edges': [[a, b, length] for a, b, length in scene.edges],
        'features': scene.features.tolist(),
        'tours': [{
            'id': tour.tour_id,
            'episodes': [{
                'id': ep.episode_id,
                'start': ep.start,
                'goal': ep.goal,
                'teacher_path': list(ep.teacher_path),
                'instruction': ep.instruction.tolist(),
            } for ep in tour.episodes],
        } for tour in tours],
    }


def scene_from_document(document):
    """Rebuild a scene and its tours from ``scene_to_document`` output."""
    if document.get('version') != SCENE_SCHEMA_VERSION:
        raise GenerationError(f"unsupported scene document version {document.get('version')}")
    graph = nx.Graph()
    graph.add_nodes_from(node['id'] for node in document['nodes'])
    for a, b, length in document['edges']:
        graph.add_edge(a, b, length=length)
    positions = np.array([node['position'] for node in sorted(document['nodes'], key=lambda n: n['id'])])
    scene = SceneGraph(graph, np.array(document['features']), positions, document['seed'], document['params'])
    tours = []
    for tour_doc in document.get('tours', []):
        episodes = []
        for ep in tour_doc['episodes']:
            instruction = np.array(ep['instruction'], dtype=np.float64)
            instruction.setflags(write=False)
            episodes.append(Episode(instruction, ep['start'], ep['goal'], tuple(ep['teacher_path']), ep['id']))
        tours.append(Tour(scene, tuple(episodes), tour_doc['id']))
    return scene, tours
