"""On-disk index layout as a Zarr v2 directory store.

::

    <index>/
      .zgroup
      info/            group, manifest in .zattrs
      rep_embeddings   array [n_leaders, dim]  storage dtype
      rep_item_ids     array [n_leaders]       <u8
      index_root/      group: embeddings, item_ids  (level-1 node ids)
      lvl_1/ .. lvl_L/ groups of node_<id>/ groups: embeddings, item_ids

Every array is written uncompressed as a single chunk so that any Zarr v2
reader (or ``numpy.fromfile``) can open it.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import (
    COMPUTE_DTYPE,
    IndexConfig,
    IndexParams,
    Metric,
    StorageDtype,
    compute_index_params,
    level_node_counts,
)
from .errors import ManifestError, NodeAbsentError, StoreError, StoreExistsError

ID_DTYPE = np.dtype("<u8")
ZARR_FORMAT = 2

_MANIFEST_FIELDS = (
    "levels",
    "metric",
    "dim",
    "dtype",
    "total_items",
    "seed",
    "cluster_bytes",
    "items_per_cluster",
    "n_leaders",
    "fanout",
    "node_counts",
)


class NodeRef(NamedTuple):
    level: int
    node_id: int

    def __str__(self):
        return f"lvl_{self.level}/node_{self.node_id}"


@dataclass(frozen=True)
class NodeData:
    """Rows of a node and the ids they point to.

    ``item_ids`` are child node ids at the next level for internal nodes and
    collection item ids for leaves.
    """

    embeddings: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {self.embeddings.shape}")
        if self.embeddings.shape[0] != len(self.item_ids):
            raise ValueError(
                f"{self.embeddings.shape[0]} embedding rows but {len(self.item_ids)} ids"
            )

    def __len__(self):
        return len(self.item_ids)

    @property
    def nbytes(self) -> int:
        return int(self.embeddings.nbytes + self.item_ids.nbytes)

    @classmethod
    def from_arrays(cls, embeddings, item_ids, dim: int | None = None) -> "NodeData":
        ids = np.asarray(item_ids, dtype=ID_DTYPE).reshape(-1)
        emb = np.asarray(embeddings, dtype=COMPUTE_DTYPE)
        if emb.size == 0:
            emb = emb.reshape(0, dim if dim is not None else (emb.shape[-1] if emb.ndim == 2 else 0))
        return cls(emb, ids)


@dataclass(frozen=True)
class IndexManifest:
    config: IndexConfig
    params: IndexParams
    node_counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        counts = tuple(int(c) for c in (self.node_counts or level_node_counts(self.params, self.depth)))
        object.__setattr__(self, "node_counts", counts)
        if len(counts) != self.depth:
            raise ManifestError(f"node_counts has {len(counts)} entries, expected {self.depth}")
        if counts[-1] != self.params.n_leaders:
            raise ManifestError(
                f"leaf node count {counts[-1]} != n_leaders {self.params.n_leaders}"
            )
        if any(c < 1 for c in counts):
            raise ManifestError(f"node counts must be positive: {counts}")

    @classmethod
    def from_config(cls, config: IndexConfig) -> "IndexManifest":
        return cls(config, compute_index_params(config))

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def metric(self) -> Metric:
        return self.config.metric

    def node_count(self, level: int) -> int:
        if not 1 <= level <= self.depth:
            raise ValueError(f"level {level} outside 1..{self.depth}")
        return self.node_counts[level - 1]

    def to_attrs(self) -> dict:
        c, p = self.config, self.params
        return {
            "levels": c.depth,
            "metric": c.metric.value,
            "dim": c.dim,
            "dtype": c.storage_dtype.value,
            "total_items": c.n_items,
            "seed": c.seed,
            "cluster_bytes": c.target_cluster_bytes,
            "items_per_cluster": p.items_per_cluster,
            "n_leaders": p.n_leaders,
            "fanout": p.fanout,
            "node_counts": list(self.node_counts),
        }

    @classmethod
    def from_attrs(cls, attrs: dict) -> "IndexManifest":
        missing = [k for k in _MANIFEST_FIELDS if k not in attrs]
        if missing:
            raise ManifestError(f"info attributes missing field(s): {', '.join(missing)}")
        try:
            levels = _strict_int(attrs, "levels")
            if levels < 1:
                raise ManifestError(f"invalid levels={levels}; must be >= 1")
            config = IndexConfig(
                depth=levels,
                metric=Metric.parse(attrs["metric"]),
                dim=_strict_int(attrs, "dim"),
                storage_dtype=StorageDtype.parse(attrs["dtype"]),
                target_cluster_bytes=_strict_int(attrs, "cluster_bytes"),
                n_items=_strict_int(attrs, "total_items"),
                seed=_strict_int(attrs, "seed"),
            )
            params = IndexParams(
                items_per_cluster=_strict_int(attrs, "items_per_cluster"),
                n_leaders=_strict_int(attrs, "n_leaders"),
                fanout=_strict_int(attrs, "fanout"),
            )
            counts = attrs["node_counts"]
            if not isinstance(counts, list):
                raise ManifestError("node_counts must be a list")
            return cls(config, params, tuple(_strict_int({"node_counts": c}, "node_counts") for c in counts))
        except ManifestError:
            raise
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"invalid info attributes: {exc}") from exc


def _strict_int(attrs: dict, key: str) -> int:
    value = attrs[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ManifestError(f"field {key!r} must be an integer, got {value!r}")
    return value


# -- Zarr v2 primitives ------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=4, sort_keys=True)
    os.replace(tmp, path)


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def write_group(path: Path, attrs: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not (path / ".zgroup").exists():
        _write_json(path / ".zgroup", {"zarr_format": ZARR_FORMAT})
    if attrs is not None:
        _write_json(path / ".zattrs", attrs)


def read_attrs(path: Path) -> dict:
    path = Path(path)
    if not (path / ".zgroup").exists():
        raise StoreError(f"{path} is not a group")
    attrs_path = path / ".zattrs"
    if not attrs_path.exists():
        return {}
    try:
        attrs = _read_json(attrs_path)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt attributes in {attrs_path}: {exc}") from exc
    if not isinstance(attrs, dict):
        raise ManifestError(f"attributes in {attrs_path} are not a JSON object")
    return attrs


def write_array(path: Path, data: np.ndarray, dtype) -> None:
    """Write ``data`` as one uncompressed little-endian C-order chunk.

    The chunk lands before ``.zarray`` so a reader never sees a descriptor
    without its data.
    """
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(data).astype(np.dtype(dtype), copy=False))
    path.mkdir(parents=True, exist_ok=True)
    chunks = [max(1, s) for s in arr.shape]
    meta = {
        "zarr_format": ZARR_FORMAT,
        "shape": list(arr.shape),
        "chunks": chunks,
        "dtype": arr.dtype.str,
        "compressor": None,
        "fill_value": 0,
        "order": "C",
        "filters": None,
        "dimension_separator": ".",
    }
    key = ".".join("0" for _ in arr.shape)
    chunk = path / key
    if arr.size:
        tmp = path / (key + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(arr.tobytes(order="C"))
        os.replace(tmp, chunk)
    elif chunk.exists():
        chunk.unlink()
    _write_json(path / ".zarray", meta)


def array_meta(path: Path) -> dict:
    path = Path(path)
    meta_path = path / ".zarray"
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    try:
        meta = _read_json(meta_path)
    except json.JSONDecodeError as exc:
        raise StoreError(f"corrupt array descriptor {meta_path}: {exc}") from exc
    if meta.get("zarr_format") != ZARR_FORMAT:
        raise StoreError(f"{meta_path}: unsupported zarr_format {meta.get('zarr_format')!r}")
    if meta.get("compressor") is not None or meta.get("filters"):
        raise StoreError(f"{meta_path}: compressed arrays are not supported")
    if meta.get("order", "C") != "C":
        raise StoreError(f"{meta_path}: only C order is supported")
    if list(meta["chunks"]) != [max(1, s) for s in meta["shape"]]:
        raise StoreError(f"{meta_path}: expected a single chunk covering the array")
    return meta


def read_array(path: Path) -> np.ndarray:
    path = Path(path)
    meta = array_meta(path)
    shape = tuple(int(s) for s in meta["shape"])
    dtype = np.dtype(meta["dtype"])
    if 0 in shape:
        return np.zeros(shape, dtype=dtype)
    chunk = path / ".".join("0" for _ in shape)
    if not chunk.exists():
        return np.full(shape, meta.get("fill_value") or 0, dtype=dtype)
    raw = np.fromfile(chunk, dtype=dtype)
    if raw.size != int(np.prod(shape)):
        raise StoreError(f"{chunk}: expected {int(np.prod(shape))} elements, found {raw.size}")
    return raw.reshape(shape)


# -- index store --------------------------------------------------------------


class Store:
    """Read/write access to one index directory.

    Reads may be issued from several threads. Writes need exclusive access.
    """

    def __init__(self, path, manifest: IndexManifest):
        self.path = Path(path)
        self.manifest = manifest
        self._dtype = manifest.config.storage_dtype.numpy
        self._lock = threading.Lock()
        self.node_reads = 0

    @classmethod
    def open(cls, path) -> "Store":
        return cls(path, read_manifest(path))

    def __repr__(self):
        return f"Store({str(self.path)!r}, levels={self.manifest.depth})"

    # paths
    def level_path(self, level: int) -> Path:
        return self.path / f"lvl_{level}"

    def node_path(self, ref: NodeRef) -> Path:
        return self.level_path(ref.level) / f"node_{ref.node_id}"

    def _check_ref(self, ref: NodeRef) -> NodeRef:
        ref = NodeRef(int(ref[0]), int(ref[1]))
        if not 1 <= ref.level <= self.manifest.depth:
            raise StoreError(f"level {ref.level} outside 1..{self.manifest.depth}")
        if not 0 <= ref.node_id < self.manifest.node_count(ref.level):
            raise StoreError(
                f"{ref}: node id out of range (level {ref.level} has "
                f"{self.manifest.node_count(ref.level)} nodes)"
            )
        return ref

    def _check_data(self, data: NodeData, child_count: int | None) -> None:
        if data.embeddings.shape[1] != self.manifest.dim and len(data):
            raise StoreError(
                f"embedding dim {data.embeddings.shape[1]} != index dim {self.manifest.dim}"
            )
        if child_count is not None and len(data) and int(data.item_ids.max()) >= child_count:
            raise StoreError(f"child id {int(data.item_ids.max())} >= node count {child_count}")

    def _write_pair(self, path: Path, data: NodeData) -> None:
        write_group(path)
        emb = data.embeddings
        if emb.shape[0] == 0:
            emb = np.zeros((0, self.manifest.dim), dtype=COMPUTE_DTYPE)
        write_array(path / "embeddings", emb, self._dtype)
        write_array(path / "item_ids", data.item_ids, ID_DTYPE)

    def _read_pair(self, path: Path, what: str) -> NodeData:
        try:
            emb = read_array(path / "embeddings")
            ids = read_array(path / "item_ids")
        except FileNotFoundError:
            raise NodeAbsentError(f"node absent: {what}") from None
        if emb.ndim != 2 or ids.ndim != 1 or emb.shape[0] != ids.shape[0]:
            raise StoreError(f"{what}: inconsistent arrays {emb.shape} / {ids.shape}")
        emb = emb.astype(COMPUTE_DTYPE)
        ids = ids.astype(ID_DTYPE, copy=False)
        emb.setflags(write=False)
        ids.setflags(write=False)
        return NodeData(emb, ids)

    # nodes
    def write_node(self, ref: NodeRef, data: NodeData) -> None:
        ref = self._check_ref(ref)
        child_count = (
            self.manifest.node_count(ref.level + 1) if ref.level < self.manifest.depth else None
        )
        self._check_data(data, child_count)
        self._write_pair(self.node_path(ref), data)

    def read_node(self, ref: NodeRef) -> NodeData:
        ref = self._check_ref(ref)
        data = self._read_pair(self.node_path(ref), str(ref))
        with self._lock:
            self.node_reads += 1
        return data

    def node_size(self, ref: NodeRef) -> int:
        """Child count of a node, read from its descriptor only."""
        ref = self._check_ref(ref)
        try:
            return int(array_meta(self.node_path(ref) / "item_ids")["shape"][0])
        except FileNotFoundError:
            raise NodeAbsentError(f"node absent: {ref}") from None

    def written_nodes(self, level: int) -> list[int]:
        root = self.level_path(level)
        if not root.is_dir():
            return []
        ids = []
        for entry in root.iterdir():
            if entry.name.startswith("node_") and entry.is_dir():
                ids.append(int(entry.name[5:]))
        return sorted(ids)

    # root
    def write_root(self, data: NodeData) -> None:
        self._check_data(data, self.manifest.node_count(1))
        self._write_pair(self.path / "index_root", data)

    def read_root(self) -> NodeData:
        return self._read_pair(self.path / "index_root", "index_root")

    # representatives
    def write_representatives(self, embeddings, item_ids) -> None:
        emb = np.asarray(embeddings)
        ids = np.asarray(item_ids, dtype=ID_DTYPE).reshape(-1)
        n = self.manifest.params.n_leaders
        if emb.ndim != 2 or emb.shape[0] != n or ids.shape[0] != n:
            raise StoreError(
                f"representatives must have n_leaders={n} rows, got {emb.shape[0] if emb.ndim == 2 else emb.shape} "
                f"embeddings and {ids.shape[0]} ids"
            )
        if emb.shape[1] != self.manifest.dim:
            raise StoreError(f"representative dim {emb.shape[1]} != index dim {self.manifest.dim}")
        write_array(self.path / "rep_embeddings", emb, self._dtype)
        write_array(self.path / "rep_item_ids", ids, ID_DTYPE)

    def read_representatives(self) -> tuple[np.ndarray, np.ndarray]:
        emb = read_array(self.path / "rep_embeddings").astype(COMPUTE_DTYPE)
        ids = read_array(self.path / "rep_item_ids").astype(ID_DTYPE, copy=False)
        return emb, ids


def create_store(path, manifest: IndexManifest) -> Store:
    """Lay out an empty index skeleton at ``path``."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise StoreExistsError(f"store exists: {path} is a file")
        if any(path.iterdir()):
            raise StoreExistsError(f"store exists: {path} is not empty")
    try:
        write_group(path)
        write_group(path / "info", manifest.to_attrs())
        dtype = manifest.config.storage_dtype.numpy
        write_array(path / "rep_embeddings", np.zeros((0, manifest.dim)), dtype)
        write_array(path / "rep_item_ids", np.zeros(0), ID_DTYPE)
        write_group(path / "index_root")
        for level in range(1, manifest.depth + 1):
            write_group(path / f"lvl_{level}")
    except OSError as exc:
        raise StoreError(f"cannot create store at {path}: {exc}") from exc
    return Store(path, manifest)


def read_manifest(path) -> IndexManifest:
    path = Path(path)
    if not path.is_dir():
        raise StoreError(f"no index store at {path}")
    info = path / "info"
    if not (info / ".zgroup").exists():
        raise ManifestError(f"{path}: missing info group")
    return IndexManifest.from_attrs(read_attrs(info))
