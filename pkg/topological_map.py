"""Per-episode topological map G_t."""

import networkx as nx
import numpy as np

from errors import ShapeError, UnknownViewpointError

CATEGORIES = ('current', 'visited', 'frontier', 'retrieved')
_RANK = {'retrieved': 0, 'frontier': 1, 'visited': 2, 'current': 3}


class EpisodicGraph:
    """Nodes carry a category, a feature and optional history attachments.

    A node's category only moves up ``retrieved < frontier < visited <
    current``; the previous current node becomes visited when the agent moves.
    """

    def __init__(self):
        self.graph = nx.Graph()
        self.current = None

    def __contains__(self, viewpoint):
        return viewpoint in self.graph

    def __len__(self):
        return self.graph.number_of_nodes()

    def nodes(self):
        return sorted(self.graph.nodes)

    def edges(self):
        return sorted((min(a, b), max(a, b)) for a, b in self.graph.edges)

    def category(self, viewpoint):
        self._require(viewpoint)
        return self.graph.nodes[viewpoint]['category']

    def feature(self, viewpoint):
        self._require(viewpoint)
        return self.graph.nodes[viewpoint]['feature']

    def attachments(self, viewpoint):
        self._require(viewpoint)
        return list(self.graph.nodes[viewpoint]['attachments'])

    def with_category(self, *categories):
        return [v for v in self.nodes() if self.graph.nodes[v]['category'] in categories]

    def candidates(self):
        """Unvisited nodes the agent may move to."""
        return self.with_category('frontier', 'retrieved')

    def _require(self, viewpoint):
        if viewpoint not in self.graph:
            raise UnknownViewpointError(f"viewpoint {viewpoint} is not in the episodic graph")

    def _put(self, viewpoint, feature, category, replace_feature):
        feature = np.asarray(feature, dtype=np.float64)
        if viewpoint not in self.graph:
            self.graph.add_node(viewpoint, category=category, feature=feature.copy(), attachments=[])
            return
        node = self.graph.nodes[viewpoint]
        if _RANK[category] > _RANK[node['category']]:
            node['category'] = category
        if replace_feature:
            node['feature'] = feature.copy()

    def visit(self, viewpoint, feature):
        """Make ``viewpoint`` current with its full pooled feature."""
        if self.current is not None and self.current != viewpoint:
            self.graph.nodes[self.current]['category'] = 'visited'
        self._put(viewpoint, feature, 'current', replace_feature=True)
        self.current = viewpoint

    def pass_through(self, viewpoint, feature):
        """An intermediate hop of a multi-hop move: visited, never current."""
        self._put(viewpoint, feature, 'visited', replace_feature=True)

    def add_frontier(self, viewpoint, feature, edge_from=None):
        existing = self.graph.nodes[viewpoint] if viewpoint in self.graph else None
        keep = existing is not None and existing['category'] in ('visited', 'current', 'retrieved')
        self._put(viewpoint, feature, 'frontier', replace_feature=not keep)
        if edge_from is not None:
            self.add_edge(edge_from, viewpoint)

    def add_retrieved(self, viewpoint, feature):
        self._put(viewpoint, feature, 'retrieved', replace_feature=False)

    def set_feature(self, viewpoint, feature):
        self._require(viewpoint)
        self.graph.nodes[viewpoint]['feature'] = np.asarray(feature, dtype=np.float64).copy()

    def add_edge(self, a, b):
        self._require(a)
        self._require(b)
        self.graph.add_edge(a, b)

    def connect_from(self, persistent):
        """Copy every persistent-graph edge whose endpoints are both in G_t."""
        for viewpoint in self.nodes():
            if viewpoint not in persistent:
                continue
            for neighbor in persistent.neighbors(viewpoint):
                if neighbor in self.graph:
                    self.graph.add_edge(viewpoint, neighbor)

    def attach(self, viewpoint, state, score):
        """Record a retrieved past state and its match score on a node."""
        self._require(viewpoint)
        state = np.asarray(state, dtype=np.float64)
        node = self.graph.nodes[viewpoint]
        if node['attachments'] and node['attachments'][0][0].shape != state.shape:
            raise ShapeError(f"viewpoint {viewpoint}: attached state shape {state.shape} differs")
        node['attachments'].append((state.copy(), float(score)))

    def hop_matrix(self, order=None):
        """Pairwise hop distances; disconnected pairs get the node count."""
        order = self.nodes() if order is None else list(order)
        index = {v: i for i, v in enumerate(order)}
        distances = np.full((len(order), len(order)), float(len(order)))
        for source, lengths in nx.all_pairs_shortest_path_length(self.graph):
            if source not in index:
                continue
            for target, hops in lengths.items():
                if target in index:
                    distances[index[source], index[target]] = hops
        return distances
