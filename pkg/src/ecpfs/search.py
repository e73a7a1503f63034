"""Incremental best-first retrieval over an opened index.

Every active query keeps its own frontier ``queue`` (one heap shared by all
levels) and a sorted buffer of scanned-but-unreturned items. Asking for more
results drains the buffer first and only resumes the tree walk when the
buffer runs short, so follow-up batches cost nothing but the extra leaves.
"""

from __future__ import annotations

import heapq
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .cache import CacheConfig, NodeCache
from .core import COMPUTE_DTYPE, Metric, ScoredItem, calculate_distances, topk_order
from .errors import ConfigError, InvalidQueryError, QueryBusyError, StoreError
from .store import (
    ID_DTYPE,
    IndexManifest,
    NodeData,
    Store,
    read_array,
    read_attrs,
    write_array,
    write_group,
)

log = logging.getLogger(__name__)

DEFAULT_K = 100
DEFAULT_B = 64
UNLIMITED = -1
STATE_FORMAT_VERSION = 1


class QueueEntry(NamedTuple):
    # tuple order is the heap order: distance, then level, then node id
    distance: float
    level: int
    node_id: int
    is_leaf: bool


@dataclass
class QueryState:
    query: np.ndarray
    queue: list[QueueEntry] = field(default_factory=list)
    item_distances: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=COMPUTE_DTYPE))
    item_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=ID_DTYPE))
    b_current: int = DEFAULT_B
    increments: int = 0
    leaves_scanned: int = 0
    started: bool = False
    emitted: int = 0
    pops: int = 0
    popped: list | None = None
    _busy: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def buffered(self) -> int:
        return len(self.item_ids)

    @property
    def exhausted(self) -> bool:
        return self.started and not self.queue

    @contextmanager
    def driving(self):
        if not self._busy.acquire(blocking=False):
            raise QueryBusyError("query is already being driven by another caller")
        try:
            yield self
        finally:
            self._busy.release()


def _exclusion_array(exclude) -> np.ndarray | None:
    if exclude is None:
        return None
    arr = np.fromiter((int(x) for x in exclude), dtype=ID_DTYPE) if not isinstance(exclude, np.ndarray) else exclude
    if arr.size == 0:
        return None
    return np.unique(arr.astype(ID_DTYPE))


def _to_items(dists: np.ndarray, ids: np.ndarray) -> list[ScoredItem]:
    return [ScoredItem(d, i) for d, i in zip(dists.tolist(), ids.tolist())]


class Index:
    """An opened index: manifest and root in memory, nodes behind a cache."""

    def __init__(self, store: Store, cache: NodeCache, root: NodeData):
        self.store = store
        self.cache = cache
        self.root = root
        self.manifest: IndexManifest = store.manifest
        self.prefetch_future = None
        self._queries: list[QueryState | None] = []
        self._table_lock = threading.Lock()
        self.record_pops = False

    def __repr__(self):
        return f"Index({str(self.path)!r}, depth={self.depth}, active_queries={self.active_queries})"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def path(self) -> Path:
        return self.store.path

    @property
    def depth(self) -> int:
        return self.manifest.depth

    @property
    def dim(self) -> int:
        return self.manifest.dim

    @property
    def metric(self) -> Metric:
        return self.manifest.metric

    @property
    def active_queries(self) -> int:
        return sum(q is not None for q in self._queries)

    def close(self) -> None:
        self.cache.close()

    # -- query table -----------------------------------------------------

    def _append(self, state: QueryState) -> int:
        with self._table_lock:
            self._queries.append(state)
            return len(self._queries) - 1

    def state(self, query_id: int) -> QueryState:
        try:
            qid = int(query_id)
        except (TypeError, ValueError):
            raise InvalidQueryError(f"invalid query id {query_id!r}") from None
        if qid < 0 or qid >= len(self._queries) or self._queries[qid] is None:
            raise InvalidQueryError(f"unknown query id {query_id}")
        return self._queries[qid]

    def close_query(self, query_id: int) -> None:
        """Release a query's state; its id is never reused."""
        self.state(query_id)
        with self._table_lock:
            self._queries[int(query_id)] = None

    # -- search ----------------------------------------------------------

    def _check_query(self, q) -> np.ndarray:
        vec = np.asarray(q, dtype=COMPUTE_DTYPE).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"query has dim {vec.shape[0]}, index dim is {self.dim}")
        if not np.isfinite(vec).all():
            raise ValueError("query contains non-finite values")
        return vec

    @staticmethod
    def _check_kb(k: int, b: int | None, mx_inc: int) -> None:
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        if b is not None and b < 1:
            raise ConfigError(f"b must be >= 1, got {b}")
        if mx_inc < UNLIMITED:
            raise ConfigError(f"mx_inc must be >= -1, got {mx_inc}")

    def new_search(
        self,
        q,
        k: int = DEFAULT_K,
        b: int = DEFAULT_B,
        mx_inc: int = UNLIMITED,
        exclude: Iterable[int] | None = None,
    ) -> tuple[list[ScoredItem], int]:
        """Start a query and return its first ``k`` results with its id."""
        self._check_kb(k, b, mx_inc)
        state = QueryState(self._check_query(q), b_current=int(b))
        if self.record_pops:
            state.popped = []
        query_id = self._append(state)
        excl = _exclusion_array(exclude)
        with state.driving():
            self._incremental(state, k, mx_inc, excl)
            results = self._next(state, k, mx_inc, excl)
        return results, query_id

    def get_next_k_items(
        self,
        query_id: int,
        k: int = DEFAULT_K,
        b: int | None = None,
        mx_inc: int = UNLIMITED,
        exclude: Iterable[int] | None = None,
    ) -> list[ScoredItem]:
        """Next ``k`` results of an active query.

        Fewer than ``k`` come back only when the frontier is exhausted, or when
        ``mx_inc`` forbids widening a filtered search. ``b`` overrides the
        query's current expansion width when given.
        """
        self._check_kb(k, b, mx_inc)
        state = self.state(query_id)
        with state.driving():
            if b is not None:
                state.b_current = int(b)
            return self._next(state, k, mx_inc, _exclusion_array(exclude))

    def incremental_search(
        self,
        query_id: int,
        k: int = DEFAULT_K,
        b: int | None = None,
        mx_inc: int = UNLIMITED,
        exclude: Iterable[int] | None = None,
    ) -> None:
        self._check_kb(k, b, mx_inc)
        state = self.state(query_id)
        with state.driving():
            if b is not None:
                state.b_current = int(b)
            self._incremental(state, k, mx_inc, _exclusion_array(exclude))

    def search(self, q, k: int = DEFAULT_K, b: int = DEFAULT_B, mx_inc: int = UNLIMITED, exclude=None):
        """One-shot query that does not keep its state."""
        results, query_id = self.new_search(q, k, b, mx_inc, exclude)
        self.close_query(query_id)
        return results

    def _next(self, state: QueryState, k: int, mx_inc: int, excl) -> list[ScoredItem]:
        if state.buffered < k and state.queue:
            self._incremental(state, k, mx_inc, excl)
        cnt = min(state.buffered, k)
        out = _to_items(state.item_distances[:cnt], state.item_ids[:cnt])
        state.item_distances = state.item_distances[cnt:]
        state.item_ids = state.item_ids[cnt:]
        state.emitted += cnt
        return out

    def _seed(self, state: QueryState) -> None:
        dists = calculate_distances(self.root.embeddings, state.query, self.metric)
        leaf = self.depth == 1
        for d, c in zip(dists.tolist(), self.root.item_ids.tolist()):
            heapq.heappush(state.queue, QueueEntry(d, 1, c, leaf))
        state.started = True

    def _incremental(self, state: QueryState, k: int, mx_inc: int, excl) -> None:
        if not state.started:
            self._seed(state)
        queue = state.queue
        b_cur = state.b_current
        leaf_cnt = 0
        inc = 0
        buffered = state.buffered
        new_d: list[np.ndarray] = []
        new_i: list[np.ndarray] = []

        while queue:
            entry = heapq.heappop(queue)
            state.pops += 1
            if state.popped is not None:
                state.popped.append((entry.level, entry.node_id))
            node = self.cache.get_node((entry.level, entry.node_id))
            if len(node) == 0:
                continue
            dists = calculate_distances(node.embeddings, state.query, self.metric)
            if entry.is_leaf:
                ids = node.item_ids
                if excl is not None:
                    keep = ~np.isin(ids, excl)
                    dists, ids = dists[keep], ids[keep]
                new_d.append(dists)
                new_i.append(ids)
                buffered += len(ids)
                leaf_cnt += 1
                state.leaves_scanned += 1
            else:
                child_level = entry.level + 1
                child_leaf = child_level == self.depth
                for d, c in zip(dists.tolist(), node.item_ids.tolist()):
                    heapq.heappush(queue, QueueEntry(d, child_level, c, child_leaf))

            if leaf_cnt >= b_cur:
                if buffered >= k:
                    break
                if mx_inc == UNLIMITED or inc < mx_inc:
                    inc += 1
                    state.increments += 1
                    b_cur *= 2
                else:
                    break

        state.b_current = b_cur
        if new_d:
            d_all = np.concatenate([state.item_distances, *new_d])
            i_all = np.concatenate([state.item_ids, *new_i])
            order = topk_order(d_all, i_all)
            state.item_distances = d_all[order]
            state.item_ids = i_all[order]

    # -- persistence -----------------------------------------------------

    def _identity(self) -> dict:
        attrs = self.manifest.to_attrs()
        return {key: attrs[key] for key in ("levels", "metric", "dim", "total_items", "seed", "n_leaders")}

    def save_query_state(self, query_id: int, path) -> Path:
        """Persist a query as a group of arrays at ``path`` (overwritten)."""
        state = self.state(query_id)
        path = Path(path)
        with state.driving():
            queue = state.queue
            write_group(
                path,
                {
                    "format_version": STATE_FORMAT_VERSION,
                    "query_id": int(query_id),
                    "index": self._identity(),
                    "b_current": state.b_current,
                    "increments": state.increments,
                    "leaves_scanned": state.leaves_scanned,
                    "started": state.started,
                    "emitted": state.emitted,
                    "pops": state.pops,
                },
            )
            write_array(path / "query", state.query, "<f4")
            # the heap list is saved in place so the restored heap is identical
            write_array(path / "queue_distance", np.array([e.distance for e in queue], dtype="<f8"), "<f8")
            write_array(path / "queue_level", np.array([e.level for e in queue], dtype="<u4"), "<u4")
            write_array(path / "queue_node", np.array([e.node_id for e in queue], dtype="<u8"), "<u8")
            write_array(path / "item_distance", state.item_distances, "<f4")
            write_array(path / "item_id", state.item_ids, "<u8")
        return path

    def load_query_state(self, path) -> int:
        """Restore a saved query into this index's table; returns its new id."""
        path = Path(path)
        try:
            attrs = read_attrs(path)
            if attrs.get("format_version") != STATE_FORMAT_VERSION:
                raise StoreError(f"{path}: unsupported query state version {attrs.get('format_version')!r}")
            if attrs.get("index") != self._identity():
                raise StoreError(f"{path}: query state belongs to a different index")
            query = read_array(path / "query").astype(COMPUTE_DTYPE)
            qd = read_array(path / "queue_distance")
            ql = read_array(path / "queue_level")
            qn = read_array(path / "queue_node")
            item_d = read_array(path / "item_distance").astype(COMPUTE_DTYPE)
            item_i = read_array(path / "item_id").astype(ID_DTYPE)
            counters = {key: int(attrs[key]) for key in ("b_current", "increments", "leaves_scanned", "emitted", "pops")}
            started = bool(attrs["started"])
        except FileNotFoundError as exc:
            raise StoreError(f"{path}: incomplete query state ({exc})") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise StoreError(f"{path}: corrupt query state ({exc})") from exc
        if not (len(qd) == len(ql) == len(qn)) or len(item_d) != len(item_i):
            raise StoreError(f"{path}: query state arrays have inconsistent lengths")
        if query.shape != (self.dim,):
            raise StoreError(f"{path}: query vector has shape {query.shape}, expected ({self.dim},)")
        depth = self.depth
        queue = [
            QueueEntry(float(d), int(lv), int(n), int(lv) == depth)
            for d, lv, n in zip(qd.tolist(), ql.tolist(), qn.tolist())
        ]
        state = QueryState(query, queue, item_d, item_i, started=started, **counters)
        if self.record_pops:
            state.popped = []
        return self._append(state)


def open_index(path, cache_config: CacheConfig | None = None, *, background_prefetch: bool = False) -> Index:
    """Open an index reading only its manifest and root.

    No node arrays are touched unless ``cache_config.prefetch_to_level`` asks
    for it.
    """
    store = Store.open(path)
    cache = NodeCache(store, cache_config or CacheConfig())
    root = store.read_root()
    if len(root) == 0:
        raise StoreError(f"{path}: index root is empty")
    index = Index(store, cache, root)
    level = cache.config.prefetch_to_level
    if level:
        index.prefetch_future = cache.prefetch(level, background=background_prefetch)
    return index


def brute_force_search(vectors, q, k: int, metric, exclude=None, *, block_rows: int = 1 << 16) -> list[ScoredItem]:
    """Exact top-``k`` by full scan, ordered like the engine (distance, then id)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rows = vectors.to_numpy() if hasattr(vectors, "to_numpy") else np.asarray(vectors)
    excl = _exclusion_array(exclude)
    best_d = np.zeros(0, dtype=COMPUTE_DTYPE)
    best_i = np.zeros(0, dtype=ID_DTYPE)
    for start in range(0, rows.shape[0], block_rows):
        block = rows[start : start + block_rows]
        d = calculate_distances(block, q, metric)
        ids = np.arange(start, start + len(block), dtype=ID_DTYPE)
        if excl is not None:
            keep = ~np.isin(ids, excl)
            d, ids = d[keep], ids[keep]
        d = np.concatenate([best_d, d])
        ids = np.concatenate([best_i, ids])
        order = topk_order(d, ids)[:k]
        best_d, best_i = d[order], ids[order]
    return _to_items(best_d, best_i)


# -- CLI session helpers -----------------------------------------------------


def state_path(state_dir, query_id: int) -> Path:
    return Path(state_dir) / "query_states" / str(int(query_id))


def next_state_id(state_dir) -> int:
    root = Path(state_dir) / "query_states"
    if not root.is_dir():
        return 0
    ids = [int(p.name) for p in root.iterdir() if p.is_dir() and p.name.isdigit()]
    return max(ids, default=-1) + 1


def init_state_dir(state_dir) -> Path:
    state_dir = Path(state_dir)
    write_group(state_dir)
    write_group(state_dir / "query_states")
    return state_dir
