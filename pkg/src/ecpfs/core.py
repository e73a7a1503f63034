"""Index parameter derivation, distance kernels and the query-cost model.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

COMPUTE_DTYPE = np.float32


class Metric(str, enum.Enum):
    L2 = "l2"
    COSINE = "cosine"
    INNER_PRODUCT = "ip"

    @classmethod
    def parse(cls, value: "Metric | str") -> "Metric":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"euclidean": "l2", "inner_product": "ip", "dot": "ip", "cos": "cosine"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown metric {value!r}") from None


class StorageDtype(str, enum.Enum):
    F16 = "f16"
    F32 = "f32"

    @classmethod
    def parse(cls, value: "StorageDtype | str") -> "StorageDtype":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"float16": "f16", "float32": "f32", "<f2": "f16", "<f4": "f32"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown storage dtype {value!r}") from None

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f2") if self is StorageDtype.F16 else np.dtype("<f4")

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize


@dataclass(frozen=True)
class IndexConfig:
    depth: int
    metric: Metric
    dim: int
    storage_dtype: StorageDtype
    target_cluster_bytes: int
    n_items: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        object.__setattr__(self, "storage_dtype", StorageDtype.parse(self.storage_dtype))
        if int(self.depth) < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if int(self.dim) < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if int(self.n_items) < 0:
            raise ConfigError(f"n_items must be >= 0, got {self.n_items}")
        if int(self.seed) < 0:
            raise ConfigError(f"seed must be unsigned, got {self.seed}")
        if int(self.target_cluster_bytes) < self.vector_bytes:
            raise ConfigError(
                f"target_cluster_bytes={self.target_cluster_bytes} is smaller than one "
                f"vector ({self.vector_bytes} bytes)"
            )

    @property
    def vector_bytes(self) -> int:
        return int(self.dim) * self.storage_dtype.itemsize


@dataclass(frozen=True)
class IndexParams:
    items_per_cluster: int
    n_leaders: int
    fanout: int


class ScoredItem(NamedTuple):
    distance: float
    item_id: int


def integer_root_ceil(n: int, depth: int) -> int:
    """Smallest integer ``w`` with ``w ** depth >= n``."""
    if n <= 1:
        return 1
    w = max(1, int(round(n ** (1.0 / depth))))
    while w**depth < n:
        w += 1
    while w > 1 and (w - 1) ** depth >= n:
        w -= 1
    return w


def compute_index_params(config: IndexConfig) -> IndexParams:
    """Derive cluster population, leader count and per-level fanout.

    ``items_per_cluster`` rounds half up, the leader count and fanout round up.

    >>> cfg = IndexConfig(3, "l2", 1152, "f16", 131072, 1_000_000)
    >>> compute_index_params(cfg)
    IndexParams(items_per_cluster=57, n_leaders=17544, fanout=26)
    """
    if config.n_items == 0:
        raise ConfigError("empty collection: nothing to index")
    v = config.vector_bytes
    c = int(config.target_cluster_bytes)
    items_per_cluster = max(1, (2 * c + v) // (2 * v))
    n_leaders = max(1, -(-int(config.n_items) // items_per_cluster))
    fanout = integer_root_ceil(n_leaders, int(config.depth))
    return IndexParams(items_per_cluster, n_leaders, fanout)


def level_node_counts(params: IndexParams, depth: int) -> list[int]:
    """Number of nodes at levels ``1..depth``; the last entry is the leaf count."""
    counts = []
    for level in range(1, depth + 1):
        div = params.fanout ** (depth - level)
        counts.append(max(1, -(-params.n_leaders // div)))
    return counts


def estimated_query_cost(params: IndexParams, depth: int, b: int) -> int:
    """Expected distance computations for a search expanded to ``b`` branches."""
    if b < 1:
        raise ConfigError(f"b must be >= 1, got {b}")
    w = params.fanout
    return w + (depth - 1) * b * w + b * params.items_per_cluster


def _as_matrix(embeddings) -> np.ndarray:
    mat = np.asarray(embeddings)
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {mat.shape}")
    return mat.astype(COMPUTE_DTYPE, copy=False)


def calculate_distances(embeddings, query, metric: Metric | str) -> np.ndarray:
    """Distance from ``query`` to every row of ``embeddings`` (smaller is closer).

    L2 is the Euclidean distance and COSINE is ``1 - cos``, both clamped at zero.
    INNER_PRODUCT returns the negated dot product and only guarantees ordering.
    Arithmetic is float32 whatever the input dtype.
    """
    metric = Metric.parse(metric)
    mat = _as_matrix(embeddings)
    q = np.asarray(query).astype(COMPUTE_DTYPE, copy=False).reshape(-1)
    if mat.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: rows have {mat.shape[1]}, query has {q.shape[0]}")
    if not np.isfinite(q).all() or not np.isfinite(mat).all():
        raise ValueError("non-finite values in distance input")
    if mat.shape[0] == 0:
        return np.empty(0, dtype=COMPUTE_DTYPE)

    if metric is Metric.L2:
        diff = mat - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if metric is Metric.COSINE:
        dots = np.einsum("ij,j->i", mat, q)
        norms = np.sqrt(np.einsum("ij,ij->i", mat, mat)) * np.sqrt(np.dot(q, q))
        sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
        out = COMPUTE_DTYPE(1.0) - sims
        return np.maximum(out, COMPUTE_DTYPE(0.0))
    # einsum keeps each row independent of batch size (BLAS gemv may block rows)
    return -np.einsum("ij,j->i", mat, q)


def topk_order(distances: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorting ascending by distance, ties broken by smaller id."""
    return np.lexsort((ids, distances))
