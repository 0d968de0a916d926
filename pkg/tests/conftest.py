import numpy as np
import pytest

from hmrfnet import FeatureSpec, ModelParams, NodeTable, build_edge_index

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def ring_nodes(scale=0.5, systems="a"):
    """Six nodes on a slightly puckered ring; the geometry used for recovery runs."""
    ang = np.arange(6) * np.pi / 3
    coords = np.c_[np.cos(ang), np.sin(ang), 0.3 * (-1.0) ** np.arange(6)] * scale
    return NodeTable.from_records([(f"n{i}", coords[i], systems[i % len(systems)]) for i in range(6)])


def random_instance(rng, n_nodes, names=("bias", "common_neighbors", "same_system"), beta_scale=0.7):
    nodes = NodeTable.from_records(
        [(f"n{i}", rng.normal(size=3) * 0.5, "ab"[i % 2]) for i in range(n_nodes)])
    spec = FeatureSpec.from_names(list(names))
    params = ModelParams(0.1, 0.5, 0.2, 0.25, rng.normal(size=len(spec)) * beta_scale)
    return nodes, build_edge_index(nodes), spec, params


@pytest.fixture
def frozen():
    """Four-node instance whose reference values come from ``tests/oracle.py``."""
    coords = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.5, 0.0), (0.5, 0.5, 1.0)]
    systems = ["vis", "vis", "mot", "mot"]
    nodes = NodeTable.from_records([(n, c, s) for n, c, s in zip("abcd", coords, systems)])
    spec = FeatureSpec.from_names(["bias", "common_neighbors", "same_system"])
    params = ModelParams(0.1, 0.55, 0.2, 0.25, [-0.4, 0.7, 0.3])
    y = np.array([0.62, 0.05, 0.48, 0.71, 0.12, 0.33])
    return dict(nodes=nodes, idx=build_edge_index(nodes), spec=spec, params=params, y=y,
                coords=coords, systems=systems)
