"""File-structured hierarchical cluster-pruning index for approximate nearest-neighbour search."""

__version__ = "0.1.0"

from .builder import BuildReport, build_index
from .cache import CacheConfig, CacheStats, NodeCache
from .core import (
    IndexConfig,
    IndexParams,
    Metric,
    ScoredItem,
    StorageDtype,
    calculate_distances,
    compute_index_params,
    estimated_query_cost,
)
from .datasets import Dataset, VectorFormat, from_array, ingest_vectors
from .errors import EcpfsError
from .search import Index, QueryState, brute_force_search, open_index
from .store import IndexManifest, NodeData, NodeRef, Store, create_store, read_manifest

__all__ = [
    "BuildReport",
    "CacheConfig",
    "CacheStats",
    "Dataset",
    "EcpfsError",
    "Index",
    "IndexConfig",
    "IndexManifest",
    "IndexParams",
    "Metric",
    "NodeCache",
    "NodeData",
    "NodeRef",
    "QueryState",
    "ScoredItem",
    "StorageDtype",
    "Store",
    "VectorFormat",
    "brute_force_search",
    "build_index",
    "calculate_distances",
    "compute_index_params",
    "create_store",
    "estimated_query_cost",
    "from_array",
    "ingest_vectors",
    "open_index",
    "read_manifest",
]
