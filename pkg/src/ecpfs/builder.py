"""Top-down index construction.

Leaders are a seeded random sample of the collection, nested across levels:
the level-``i`` leaders are a prefix of the level-``i+1`` leaders. Each leader
below level 1 hangs off the node reached by following the single closest edge
from the root through the partial index, and every item is then routed the
same way down to a leaf.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    COMPUTE_DTYPE,
    IndexConfig,
    IndexParams,
    calculate_distances,
    level_node_counts,
)
from .datasets import Dataset, from_array
from .errors import ConfigError, StoreError
from .store import ID_DTYPE, IndexManifest, NodeData, NodeRef, Store, create_store

log = logging.getLogger(__name__)

DEFAULT_BLOCK_ROWS = 16384
DEFAULT_BUFFER_ROWS = 1 << 20


def select_leaders(n_items: int, params: IndexParams, depth: int, seed: int) -> list[np.ndarray]:
    """Dataset row ids of the leaders at levels ``1..depth`` (index 0 is level 1)."""
    if params.n_leaders > n_items:
        raise ConfigError(f"n_leaders={params.n_leaders} exceeds n_items={n_items}")
    order = np.random.default_rng(seed).permutation(n_items).astype(np.int64)
    return [order[:count] for count in level_node_counts(params, depth)]


@dataclass
class Skeleton:
    """Leader vectors per level and the child lists of every internal node.

    ``children[i]`` holds, for each node at level ``i + 1``, the sorted ids of
    its children at level ``i + 2``.
    """

    depth: int
    leader_ids: list[np.ndarray]
    leader_vectors: list[np.ndarray]
    children: list[list[np.ndarray]] = field(default_factory=list)

    def node_count(self, level: int) -> int:
        return len(self.leader_ids[level - 1])

    def vectors(self, level: int) -> np.ndarray:
        return self.leader_vectors[level - 1]

    def children_of(self, level: int, node_id: int) -> np.ndarray:
        return self.children[level - 1][node_id]

    def _viable(self, target_level: int) -> list[np.ndarray]:
        """Per level, which nodes lead to at least one node at ``target_level``."""
        viable = [None] * (target_level + 1)
        viable[target_level] = np.ones(self.node_count(target_level), dtype=bool)
        for level in range(target_level - 1, 0, -1):
            below = viable[level + 1]
            viable[level] = np.array(
                [bool(below[ch].any()) if len(ch) else False for ch in self.children[level - 1]],
                dtype=bool,
            )
        return viable

    def route(self, vectors: np.ndarray, target_level: int, metric) -> np.ndarray:
        """Greedy root-to-``target_level`` descent; returns a node id per row.

        Only nodes with a path to ``target_level`` are candidates. Equal
        distances go to the smaller node id.
        """
        vectors = np.asarray(vectors, dtype=COMPUTE_DTYPE)
        viable = self._viable(target_level)
        top = np.flatnonzero(viable[1])
        current = _nearest(vectors, top, self.vectors(1)[top], metric)
        for level in range(1, target_level):
            nxt = np.empty_like(current)
            for node in np.unique(current):
                rows = np.flatnonzero(current == node)
                kids = self.children_of(level, int(node))
                kids = kids[viable[level + 1][kids]]
                nxt[rows] = _nearest(vectors[rows], kids, self.vectors(level + 1)[kids], metric)
            current = nxt
        return current


def _nearest(rows: np.ndarray, cand_ids: np.ndarray, cand_vecs: np.ndarray, metric) -> np.ndarray:
    # columns are in ascending id order, so argmin's first-hit rule is the tie-break
    dist = np.empty((rows.shape[0], len(cand_ids)), dtype=COMPUTE_DTYPE)
    for j in range(len(cand_ids)):
        dist[:, j] = calculate_distances(rows, cand_vecs[j], metric)
    return cand_ids[np.argmin(dist, axis=1)]


def _as_compute(rows: np.ndarray, storage_dtype) -> np.ndarray:
    """Round through the storage dtype so build-time distances see stored values."""
    return np.asarray(rows).astype(storage_dtype.numpy).astype(COMPUTE_DTYPE)


def _gather(dataset: Dataset, ids: np.ndarray) -> np.ndarray:
    # memmaps read fastest with ascending fancy indices
    order = np.argsort(ids)
    out = np.empty((len(ids), dataset.dim), dtype=dataset.dtype)
    out[order] = dataset.rows(ids[order])
    return out


def build_hierarchy(dataset: Dataset, leaders: list[np.ndarray], config: IndexConfig) -> Skeleton:
    depth = config.depth
    vectors = [_as_compute(_gather(dataset, ids), config.storage_dtype) for ids in leaders]
    skel = Skeleton(depth, leaders, vectors)
    for level in range(2, depth + 1):
        parents = skel.route(skel.vectors(level), level - 1, config.metric)
        parent_count = skel.node_count(level - 1)
        # stable grouping keeps each child list in ascending leader order
        order = np.argsort(parents, kind="stable")
        bounds = np.searchsorted(parents[order], np.arange(parent_count + 1))
        skel.children.append(
            [order[bounds[p] : bounds[p + 1]].astype(np.int64) for p in range(parent_count)]
        )
    return skel


class ClusterBuckets:
    """Leaf buckets filled in one streaming pass, spilled to disk when large."""

    def __init__(self, n_leaves: int, dim: int, storage_dtype, spill_dir: Path | None, buffer_rows: int):
        self.n_leaves = n_leaves
        self.dim = dim
        self.dtype = storage_dtype.numpy
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.buffer_rows = max(1, int(buffer_rows))
        self.sizes = np.zeros(n_leaves, dtype=np.int64)
        self._ids: dict[int, list[np.ndarray]] = {}
        self._vecs: dict[int, list[np.ndarray]] = {}
        self._buffered = 0
        self.spills = 0

    def add(self, leaf_ids: np.ndarray, item_ids: np.ndarray, vectors: np.ndarray) -> None:
        order = np.argsort(leaf_ids, kind="stable")
        leaf_sorted = leaf_ids[order]
        uniq, starts = np.unique(leaf_sorted, return_index=True)
        ends = np.append(starts[1:], len(order))
        for leaf, s, e in zip(uniq.tolist(), starts, ends):
            sel = order[s:e]
            self._ids.setdefault(leaf, []).append(item_ids[sel].astype(ID_DTYPE))
            self._vecs.setdefault(leaf, []).append(vectors[sel].astype(self.dtype))
            self.sizes[leaf] += len(sel)
        self._buffered += len(item_ids)
        if self.spill_dir is not None and self._buffered >= self.buffer_rows:
            self.flush()

    def flush(self) -> None:
        if self.spill_dir is None:
            return
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        for leaf in list(self._ids):
            with open(self.spill_dir / f"leaf_{leaf}.ids", "ab") as fh:
                for chunk in self._ids[leaf]:
                    fh.write(chunk.tobytes())
            with open(self.spill_dir / f"leaf_{leaf}.vec", "ab") as fh:
                for chunk in self._vecs[leaf]:
                    fh.write(np.ascontiguousarray(chunk).tobytes())
        self._ids.clear()
        self._vecs.clear()
        self._buffered = 0
        self.spills += 1

    def items(self, leaf: int) -> tuple[np.ndarray, np.ndarray]:
        """``(item_ids, vectors)`` of one leaf in ascending item order."""
        ids_parts, vec_parts = [], []
        if self.spill_dir is not None:
            ids_file = self.spill_dir / f"leaf_{leaf}.ids"
            if ids_file.exists():
                ids_parts.append(np.fromfile(ids_file, dtype=ID_DTYPE))
                vec_parts.append(
                    np.fromfile(self.spill_dir / f"leaf_{leaf}.vec", dtype=self.dtype).reshape(-1, self.dim)
                )
        ids_parts.extend(self._ids.get(leaf, []))
        vec_parts.extend(self._vecs.get(leaf, []))
        if not ids_parts:
            return np.zeros(0, dtype=ID_DTYPE), np.zeros((0, self.dim), dtype=self.dtype)
        return np.concatenate(ids_parts), np.concatenate(vec_parts)

    def cleanup(self) -> None:
        if self.spill_dir is not None and self.spill_dir.exists():
            shutil.rmtree(self.spill_dir)


def assign_items(
    dataset: Dataset,
    skeleton: Skeleton,
    config: IndexConfig,
    *,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    buffer_rows: int = DEFAULT_BUFFER_ROWS,
    spill_dir: Path | None = None,
) -> ClusterBuckets:
    """Route every item (leaders included) to exactly one leaf."""
    buckets = ClusterBuckets(
        skeleton.node_count(config.depth), dataset.dim, config.storage_dtype, spill_dir, buffer_rows
    )
    for start, block in dataset.iter_blocks(block_rows):
        vecs = _as_compute(block, config.storage_dtype)
        leaves = skeleton.route(vecs, config.depth, config.metric)
        ids = np.arange(start, start + len(block), dtype=ID_DTYPE)
        buckets.add(leaves, ids, vecs)
    return buckets


@dataclass
class BuildReport:
    path: Path
    n_items: int
    params: IndexParams
    node_counts: list[int]
    cluster_sizes: np.ndarray
    timings: dict[str, float]
    spills: int = 0

    @property
    def min_cluster(self) -> int:
        return int(self.cluster_sizes.min())

    @property
    def max_cluster(self) -> int:
        return int(self.cluster_sizes.max())

    @property
    def mean_cluster(self) -> float:
        return float(self.cluster_sizes.mean())

    def to_dict(self) -> dict:
        return {
            "path": str(self.path),
            "n_items": self.n_items,
            "items_per_cluster": self.params.items_per_cluster,
            "n_leaders": self.params.n_leaders,
            "fanout": self.params.fanout,
            "node_counts": list(self.node_counts),
            "cluster_size_min": self.min_cluster,
            "cluster_size_max": self.max_cluster,
            "cluster_size_mean": self.mean_cluster,
            "empty_clusters": int((self.cluster_sizes == 0).sum()),
            "spills": self.spills,
            "timings": dict(self.timings),
        }


def build_index(
    dataset,
    config: IndexConfig,
    path,
    *,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    buffer_rows: int = DEFAULT_BUFFER_ROWS,
) -> BuildReport:
    """Build and persist an index over ``dataset`` (a :class:`Dataset` or 2-D array)."""
    if not isinstance(dataset, Dataset):
        dataset = from_array(dataset)
    if dataset.dim != config.dim:
        raise ConfigError(f"dataset dim {dataset.dim} != config dim {config.dim}")
    if dataset.n_items != config.n_items:
        raise ConfigError(f"dataset has {dataset.n_items} items, config says {config.n_items}")
    path = Path(path)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    manifest = IndexManifest.from_config(config)
    params = manifest.params
    store = create_store(path, manifest)
    leaders = select_leaders(dataset.n_items, params, config.depth, config.seed)
    timings["select_leaders"] = time.perf_counter() - t0

    t = time.perf_counter()
    skeleton = build_hierarchy(dataset, leaders, config)
    timings["build_hierarchy"] = time.perf_counter() - t

    t = time.perf_counter()
    spill_dir = path / ".build_tmp"
    buckets = assign_items(
        dataset, skeleton, config, block_rows=block_rows, buffer_rows=buffer_rows, spill_dir=spill_dir
    )
    timings["assign_items"] = time.perf_counter() - t

    t = time.perf_counter()
    try:
        _persist(store, skeleton, buckets)
    finally:
        buckets.cleanup()
    timings["write"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    report = BuildReport(
        path, dataset.n_items, params, list(manifest.node_counts), buckets.sizes.copy(), timings, buckets.spills
    )
    log.info("built %s: %d items, node counts %s", path, dataset.n_items, report.node_counts)
    return report


def _persist(store: Store, skeleton: Skeleton, buckets: ClusterBuckets) -> None:
    depth = skeleton.depth
    n_top = skeleton.node_count(1)
    if n_top == 0:
        raise StoreError("refusing to write an empty root")
    store.write_root(NodeData(skeleton.vectors(1), np.arange(n_top, dtype=ID_DTYPE)))
    for level in range(1, depth):
        vecs = skeleton.vectors(level + 1)
        for node_id, kids in enumerate(skeleton.children[level - 1]):
            store.write_node(NodeRef(level, node_id), NodeData(vecs[kids], kids.astype(ID_DTYPE)))
    for leaf in range(skeleton.node_count(depth)):
        ids, vecs = buckets.items(leaf)
        store.write_node(NodeRef(depth, leaf), NodeData(vecs.astype(COMPUTE_DTYPE), ids))
    store.write_representatives(skeleton.vectors(depth), skeleton.leader_ids[depth - 1].astype(ID_DTYPE))
