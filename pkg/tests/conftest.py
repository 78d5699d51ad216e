import os
import sys

import networkx as nx
import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from memory import MemoryBanks, RetrievalConfig  # noqa: E402
from nav_model import NavModel, NavModelConfig  # noqa: E402
from scene import SceneGraph, generate_scene, generate_tour  # noqa: E402
from world_model import WorldModel, WorldModelConfig  # noqa: E402

FEAT = 8


def line_scene(lengths=(1.0, 2.0, 3.0, 4.0), feat_dim=FEAT, view_count=4, seed=0):
    """Path graph 0-1-2-...; positions along the x axis."""
    graph = nx.Graph()
    n = len(lengths) + 1
    graph.add_nodes_from(range(n))
    for i, length in enumerate(lengths):
        graph.add_edge(i, i + 1, length=float(length))
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, view_count, feat_dim))
    positions = np.array([[float(i), 0.0] for i in range(n)])
    return SceneGraph(graph, features, positions, seed)


@pytest.fixture
def toy_scene():
    return generate_scene(seed=3, n=14, avg_degree=3.0, feat_dim=FEAT, view_count=4)


@pytest.fixture
def toy_tour(toy_scene):
    return generate_tour(toy_scene, n_episodes=4, seed=5)


@pytest.fixture
def wm_config():
    return WorldModelConfig(feat_dim=FEAT, instr_dim=2 * FEAT, deter_dim=6, stoch_dim=4, embed_dim=5, horizon=3)


@pytest.fixture
def world_model(wm_config):
    return WorldModel(wm_config, seed=1)


@pytest.fixture
def nav_model(wm_config):
    return NavModel(NavModelConfig(feat_dim=FEAT, state_dim=wm_config.deter_dim + wm_config.stoch_dim,
                                   hidden_dim=8), seed=2)


@pytest.fixture
def retrieval_config():
    return RetrievalConfig(width=3, max_patterns=3)


@pytest.fixture
def banks():
    return MemoryBanks()
