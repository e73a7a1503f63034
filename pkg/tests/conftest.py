from __future__ import annotations

import numpy as np
import pytest

from ecpfs import IndexConfig, build_index
from ecpfs.store import IndexManifest, NodeData, NodeRef, create_store

FIXTURE_SEED = 20240607
N_ITEMS = 5000
DIM = 16
# 2560 / (16 * 4 bytes) = 40 items per cluster -> 125 leaders, fanout 12
CLUSTER_BYTES = 2560

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vectors() -> np.ndarray:
    return np.random.default_rng(FIXTURE_SEED).standard_normal((N_ITEMS, DIM)).astype(np.float32)


@pytest.fixture(scope="session")
def queries() -> np.ndarray:
    return np.random.default_rng(FIXTURE_SEED + 1).standard_normal((50, DIM)).astype(np.float32)


@pytest.fixture(scope="session")
def config() -> IndexConfig:
    return IndexConfig(
        depth=2, metric="l2", dim=DIM, storage_dtype="f32",
        target_cluster_bytes=CLUSTER_BYTES, n_items=N_ITEMS, seed=7,
    )


@pytest.fixture(scope="session")
def built(tmp_path_factory, vectors, config):
    path = tmp_path_factory.mktemp("index") / "idx"
    report = build_index(vectors, config, path)
    return path, report


@pytest.fixture(scope="session")
def index_path(built):
    return built[0]


def make_two_leaf_index(path):
    """Depth-1 index with two leaves on a line.

    Leaf 0 (leader at x=0) holds items 0 and 1, leaf 1 (leader at x=10)
    holds items 2 and 3. A query at x=0 prefers leaf 0.
    """
    config = IndexConfig(depth=1, metric="l2", dim=2, storage_dtype="f32",
                         target_cluster_bytes=16, n_items=4, seed=0)
    manifest = IndexManifest.from_config(config)
    assert manifest.params.n_leaders == 2
    store = create_store(path, manifest)
    store.write_root(NodeData.from_arrays([[0.0, 0.0], [10.0, 0.0]], [0, 1]))
    store.write_node(NodeRef(1, 0), NodeData.from_arrays([[0.5, 0.0], [1.0, 0.0]], [0, 1]))
    store.write_node(NodeRef(1, 1), NodeData.from_arrays([[9.0, 0.0], [11.0, 0.0]], [2, 3]))
    store.write_representatives([[0.0, 0.0], [10.0, 0.0]], [0, 2])
    return store
