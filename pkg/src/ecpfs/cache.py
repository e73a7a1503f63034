"""Lazily populated node cache bounded by node count, with LRU eviction."""

from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace

from .errors import ConfigError
from .store import NodeData, NodeRef, Store


class Policy(str, enum.Enum):
    LRU = "lru"


@dataclass(frozen=True)
class CacheConfig:
    """``capacity_nodes=None`` means unbounded."""

    capacity_nodes: int | None = None
    policy: Policy = Policy.LRU
    caching_enabled: bool = True
    prefetch_to_level: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        cap = self.capacity_nodes
        if cap is not None and cap < 0:
            raise ConfigError(f"capacity_nodes must be >= 0, got {cap}")
        if cap == 0 and self.caching_enabled:
            raise ConfigError("capacity 0 requires caching_enabled=False")
        if self.prefetch_to_level is not None and self.prefetch_to_level < 0:
            raise ConfigError(f"prefetch_to_level must be >= 0, got {self.prefetch_to_level}")

    @property
    def bounded(self) -> bool:
        return self.capacity_nodes is not None


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    resident_nodes: int = 0
    resident_bytes: int = 0
    prefetched: int = 0

    @property
    def gets(self) -> int:
        return self.hits + self.misses


class NodeCache:
    """Read-through cache in front of a :class:`Store`.

    Returned :class:`NodeData` is immutable and stays valid after eviction;
    eviction only drops the cache's reference. Bookkeeping is serialised by
    one lock, while store reads happen outside it so a slow read never
    blocks hits. A node is published only after it is fully loaded.
    """

    def __init__(self, store: Store, config: CacheConfig | None = None):
        self.store = store
        self.config = config or CacheConfig()
        self._nodes: OrderedDict[NodeRef, NodeData] = OrderedDict()
        self._stats = CacheStats()
        self._lock = threading.Lock()
        self._executor: ThreadPoolExecutor | None = None
        # eviction log, consumed by tests comparing against a reference LRU
        self.evicted: list[NodeRef] = []
        self.record_evictions = False

    def __repr__(self):
        return f"NodeCache(resident={len(self._nodes)}, config={self.config})"

    def __contains__(self, ref) -> bool:
        return NodeRef(*ref) in self._nodes

    def resident(self) -> list[NodeRef]:
        """Resident refs, least recently used first."""
        with self._lock:
            return list(self._nodes)

    def _evict_to(self, bound: int) -> None:
        while len(self._nodes) > bound:
            ref, data = self._nodes.popitem(last=False)
            self._stats.evictions += 1
            self._stats.resident_bytes -= data.nbytes
            if self.record_evictions:
                self.evicted.append(ref)

    def _insert(self, ref: NodeRef, data: NodeData) -> NodeData:
        # caller holds the lock
        present = self._nodes.get(ref)
        if present is not None:
            self._nodes.move_to_end(ref)
            return present
        self._nodes[ref] = data
        self._stats.resident_bytes += data.nbytes
        if self.config.bounded:
            self._evict_to(self.config.capacity_nodes)
        return data

    def get_node(self, ref) -> NodeData:
        ref = NodeRef(*ref)
        with self._lock:
            data = self._nodes.get(ref)
            if data is not None:
                self._nodes.move_to_end(ref)
                self._stats.hits += 1
                return data
            self._stats.misses += 1
            enabled = self.config.caching_enabled
        data = self.store.read_node(ref)
        if not enabled:
            return data
        with self._lock:
            if not self.config.caching_enabled:
                return data
            return self._insert(ref, data)

    def prefetch(self, max_level: int, *, background: bool = False) -> int | Future:
        """Load every node at levels ``1..max_level``, in level then id order.

        Under capacity pressure the most recently loaded nodes survive. With
        ``background=True`` the work runs on a helper thread and a future
        yielding the load count is returned.
        """
        depth = self.store.manifest.depth
        if max_level > depth:
            raise ConfigError(f"prefetch level {max_level} exceeds index depth {depth}")
        if background:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="ecpfs-prefetch")
            return self._executor.submit(self._prefetch, max_level)
        return self._prefetch(max_level)

    def _prefetch(self, max_level: int) -> int:
        if not self.config.caching_enabled:
            return 0
        loaded = 0
        for level in range(1, max_level + 1):
            for node_id in range(self.store.manifest.node_count(level)):
                ref = NodeRef(level, node_id)
                with self._lock:
                    if ref in self._nodes:
                        self._nodes.move_to_end(ref)
                        continue
                data = self.store.read_node(ref)
                with self._lock:
                    self._insert(ref, data)
                    self._stats.prefetched += 1
                loaded += 1
        return loaded

    def stats(self) -> CacheStats:
        with self._lock:
            return replace(self._stats, resident_nodes=len(self._nodes))

    def reconfigure(self, config: CacheConfig) -> None:
        """Apply a new config; shrinking or disabling evicts immediately."""
        if not isinstance(config, CacheConfig):
            raise ConfigError(f"expected CacheConfig, got {type(config).__name__}")
        with self._lock:
            self.config = config
            if not config.caching_enabled:
                self._evict_to(0)
            elif config.bounded:
                self._evict_to(config.capacity_nodes)

    def clear(self, reset_stats: bool = True) -> None:
        with self._lock:
            self._nodes.clear()
            if reset_stats:
                self._stats = CacheStats()
            else:
                self._stats.resident_bytes = 0

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
