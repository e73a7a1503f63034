"""Readers and writers for the vector file formats accepted by the builder.

fbin
    ``uint32 n, uint32 d`` then ``n*d`` little-endian float32.
fvecs
    per row: ``uint32 d`` then ``d`` float32.
raw f16
    headerless ``n*d`` little-endian float16 with a ``<file>.json`` sidecar
    holding ``{"n": ..., "d": ...}``.

Files are memory mapped so that only the rows touched are paged in.
"""

from __future__ import annotations

import enum
import json
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError


class VectorFormat(str, enum.Enum):
    FBIN = "fbin"
    FVECS = "fvecs"
    RAW_F16 = "raw_f16"

    @classmethod
    def parse(cls, value) -> "VectorFormat":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise FormatError(f"unknown vector format {value!r}") from None

    @classmethod
    def guess(cls, path) -> "VectorFormat":
        suffix = Path(path).suffix.lower()
        if suffix == ".fvecs":
            return cls.FVECS
        if suffix in (".f16", ".raw"):
            return cls.RAW_F16
        return cls.FBIN


class Dataset:
    """Row-addressable view over a vector collection.

    Rows are returned in the file's own dtype; callers convert as needed.
    """

    def __init__(self, rows: np.ndarray, source: str | None = None):
        if rows.ndim != 2:
            raise FormatError(f"dataset must be 2-D, got shape {rows.shape}")
        self._rows = rows
        self.source = source

    @property
    def n_items(self) -> int:
        return int(self._rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self._rows.shape[1])

    @property
    def dtype(self) -> np.dtype:
        return self._rows.dtype

    def __len__(self):
        return self.n_items

    def __repr__(self):
        return f"Dataset(n_items={self.n_items}, dim={self.dim}, dtype={self.dtype}, source={self.source!r})"

    def rows(self, index) -> np.ndarray:
        return np.asarray(self._rows[index])

    def iter_blocks(self, block_rows: int = 65536) -> Iterator[tuple[int, np.ndarray]]:
        for start in range(0, self.n_items, block_rows):
            yield start, np.asarray(self._rows[start : start + block_rows])

    def to_numpy(self) -> np.ndarray:
        return np.asarray(self._rows)


def from_array(vectors) -> Dataset:
    arr = np.asarray(vectors)
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D array, got shape {arr.shape}")
    return Dataset(arr, source="<array>")


def _read_fbin(path: Path) -> np.ndarray:
    size = path.stat().st_size
    if size < 8:
        raise FormatError(f"{path}: truncated fbin header ({size} bytes)")
    n, d = (int(x) for x in np.fromfile(path, dtype="<u4", count=2))
    expected = 8 + n * d * 4
    if d == 0 and n:
        raise FormatError(f"{path}: zero dimension")
    if size < expected:
        raise FormatError(f"{path}: truncated, header says {n}x{d} ({expected} bytes) but file has {size}")
    if size > expected:
        raise FormatError(f"{path}: {size - expected} trailing bytes after {n}x{d} payload")
    if n == 0:
        return np.zeros((0, d), dtype="<f4")
    return np.memmap(path, dtype="<f4", mode="r", offset=8, shape=(n, d))


def _read_fvecs(path: Path) -> np.ndarray:
    size = path.stat().st_size
    if size == 0:
        raise FormatError(f"{path}: empty fvecs file")
    if size < 4:
        raise FormatError(f"{path}: truncated fvecs row header")
    d = int(np.fromfile(path, dtype="<u4", count=1)[0])
    if d == 0:
        raise FormatError(f"{path}: zero dimension")
    row_bytes = 4 * (d + 1)
    if size % row_bytes:
        raise FormatError(f"{path}: size {size} is not a multiple of row size {row_bytes} (d={d})")
    n = size // row_bytes
    raw = np.memmap(path, dtype="<u4", mode="r", shape=(n, d + 1))
    dims = raw[:, 0]
    bad = np.flatnonzero(dims != d)
    if bad.size:
        raise FormatError(f"{path}: row {int(bad[0])} has dim {int(dims[bad[0]])}, expected {d}")
    return raw.view("<f4")[:, 1:]


def _read_raw_f16(path: Path) -> np.ndarray:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
        n, d = int(meta["n"]), int(meta["d"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{sidecar}: invalid sidecar ({exc})") from exc
    if n < 0 or d < 0:
        raise FormatError(f"{sidecar}: negative shape {n}x{d}")
    size = path.stat().st_size
    if size != n * d * 2:
        raise FormatError(f"{path}: expected {n * d * 2} bytes for {n}x{d} float16, found {size}")
    if n == 0:
        return np.zeros((0, d), dtype="<f2")
    return np.memmap(path, dtype="<f2", mode="r", shape=(n, d))


def ingest_vectors(path, format: VectorFormat | str | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    fmt = VectorFormat.guess(path) if format is None else VectorFormat.parse(format)
    reader = {
        VectorFormat.FBIN: _read_fbin,
        VectorFormat.FVECS: _read_fvecs,
        VectorFormat.RAW_F16: _read_raw_f16,
    }[fmt]
    return Dataset(reader(path), source=str(path))


def write_fbin(path, vectors) -> None:
    arr = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    with open(path, "wb") as fh:
        np.array(arr.shape, dtype="<u4").tofile(fh)
        arr.tofile(fh)


def write_fvecs(path, vectors) -> None:
    arr = np.asarray(vectors, dtype="<f4")
    n, d = arr.shape
    out = np.empty((n, d + 1), dtype="<f4")
    out[:, 0] = np.array([d], dtype="<u4").view("<f4")[0]
    out[:, 1:] = arr
    out.tofile(path)


def write_raw_f16(path, vectors) -> None:
    arr = np.ascontiguousarray(np.asarray(vectors, dtype="<f2"))
    arr.tofile(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"n": int(arr.shape[0]), "d": int(arr.shape[1])}, fh)


def read_id_list(path) -> set[int]:
    """Item ids from a JSON list or whitespace separated text."""
    text = Path(path).read_text()
    stripped = text.strip()
    if not stripped:
        return set()
    if stripped.startswith("["):
        return {int(x) for x in json.loads(stripped)}
    return {int(tok) for tok in stripped.replace(",", " ").split()}
