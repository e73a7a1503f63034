"""Single-query and incremental workloads with cold/warm latency separation.

"Cold" is application-cold: the node cache is emptied before the first run,
but the operating system's page cache is left alone.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cache import CacheConfig
from .errors import ConfigError, FormatError
from .search import DEFAULT_B, DEFAULT_K, UNLIMITED, Index, open_index

TABLE_COLUMNS = ["mode", "load_time", "disk", "memory", "followup", "workload", "workload_memory"]


@dataclass
class WorkloadReport:
    """Latencies in seconds.

    ``cold[i]`` is query ``i``'s first-run latency and ``warm[i]`` its
    ``runs - 1`` later ones. ``followup[i]`` holds every follow-up call
    (incremental batches or growing-k re-queries) across all runs.
    """

    mode: str
    k: int
    runs: int
    rounds: int
    cold: list[float]
    warm: list[list[float]]
    workload: list[float]
    followup: list[list[float]] = field(default_factory=list)
    load_time: float | None = None
    b: int = DEFAULT_B
    note: str = "application-cold: node cache reset, OS page cache untouched"

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for w in self.warm:
            if len(w) != self.runs - 1:
                raise ConfigError(f"expected {self.runs - 1} warm samples per query, got {len(w)}")

    @property
    def n_queries(self) -> int:
        return len(self.cold)

    @property
    def cold_mean(self) -> float:
        return float(np.mean(self.cold)) if self.cold else float("nan")

    @property
    def warm_mean(self) -> float:
        flat = [x for w in self.warm for x in w]
        return float(np.mean(flat)) if flat else float("nan")

    @property
    def followup_mean(self) -> float:
        flat = [x for f in self.followup for x in f]
        return float(np.mean(flat)) if flat else float("nan")

    @property
    def workload_total(self) -> float:
        return float(sum(self.workload))

    @property
    def workload_memory_mean(self) -> float:
        later = self.workload[1:]
        return float(np.mean(later)) if later else float("nan")

    def table_row(self) -> dict:
        return {
            "mode": self.mode,
            "load_time": self.load_time,
            "disk": self.cold_mean,
            "memory": self.warm_mean,
            "followup": self.followup_mean,
            "workload": self.workload[0] if self.workload else float("nan"),
            "workload_memory": self.workload_memory_mean,
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "b": self.b,
            "runs": self.runs,
            "rounds": self.rounds,
            "n_queries": self.n_queries,
            "load_time": self.load_time,
            "note": self.note,
            "cold": list(self.cold),
            "warm": [list(w) for w in self.warm],
            "followup": [list(f) for f in self.followup],
            "workload": list(self.workload),
            "summary": self.table_row() | {"workload_total": self.workload_total},
        }


def timed_open(path, cache_config: CacheConfig | None = None) -> tuple[Index, float]:
    t = time.perf_counter()
    index = open_index(path, cache_config)
    return index, time.perf_counter() - t


def _reset(index: Index) -> None:
    index.cache.clear(reset_stats=True)


def run_single_query_workload(
    index: Index,
    queries,
    k: int = DEFAULT_K,
    runs: int = 10,
    *,
    b: int = DEFAULT_B,
    mx_inc: int = UNLIMITED,
    workers: int = 0,
    load_time: float | None = None,
) -> WorkloadReport:
    """Run every query ``runs`` times; the first pass is labelled cold.

    ``workers > 0`` runs each pass on a thread pool. That is for throughput
    experiments only, since per-query latencies then overlap.
    """
    if runs < 2:
        raise ConfigError("runs must be >= 2 to separate cold and warm latencies")
    if k < 1:
        raise ConfigError("k must be >= 1")
    queries = np.asarray(queries, dtype=np.float32)
    n = len(queries)
    lat = np.zeros((runs, n))
    workload = []

    def one(i):
        t = time.perf_counter()
        index.search(queries[i], k, b, mx_inc)
        lat[run, i] = time.perf_counter() - t

    _reset(index)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for run in range(runs):
            t0 = time.perf_counter()
            if pool is None:
                for i in range(n):
                    one(i)
            else:
                list(pool.map(one, range(n)))
            workload.append(time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return WorkloadReport(
        mode="single",
        k=k,
        runs=runs,
        rounds=0,
        cold=lat[0].tolist(),
        warm=lat[1:].T.tolist(),
        workload=workload,
        load_time=load_time,
        b=b,
    )


def run_incremental_workload(
    index: Index,
    queries,
    k: int = DEFAULT_K,
    rounds: int = 10,
    runs: int = 10,
    *,
    b: int = DEFAULT_B,
    mx_inc: int = UNLIMITED,
    load_time: float | None = None,
) -> WorkloadReport:
    """Per query: one new search for ``k`` then ``rounds`` requests for ``k`` more."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if runs < 1 or k < 1:
        raise ConfigError("runs and k must be >= 1")
    queries = np.asarray(queries, dtype=np.float32)
    n = len(queries)
    first = np.zeros((runs, n))
    followup: list[list[float]] = [[] for _ in range(n)]
    workload = []
    _reset(index)
    for run in range(runs):
        t0 = time.perf_counter()
        for i in range(n):
            t = time.perf_counter()
            _, qid = index.new_search(queries[i], k, b, mx_inc)
            first[run, i] = time.perf_counter() - t
            for _ in range(rounds):
                t = time.perf_counter()
                index.get_next_k_items(qid, k, mx_inc=mx_inc)
                followup[i].append(time.perf_counter() - t)
            index.close_query(qid)
        workload.append(time.perf_counter() - t0)
    return WorkloadReport(
        mode="incremental",
        k=k,
        runs=runs,
        rounds=rounds,
        cold=first[0].tolist(),
        warm=first[1:].T.tolist(),
        workload=workload,
        followup=followup,
        load_time=load_time,
        b=b,
    )


def run_requery_baseline(
    index: Index,
    queries,
    k: int = DEFAULT_K,
    rounds: int = 10,
    runs: int = 10,
    *,
    b: int = DEFAULT_B,
    mx_inc: int = UNLIMITED,
    load_time: float | None = None,
) -> WorkloadReport:
    """Stateless comparison: round ``rd`` re-queries from scratch for ``k + k*rd``."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    queries = np.asarray(queries, dtype=np.float32)
    n = len(queries)
    first = np.zeros((runs, n))
    followup: list[list[float]] = [[] for _ in range(n)]
    workload = []
    _reset(index)
    for run in range(runs):
        t0 = time.perf_counter()
        for i in range(n):
            t = time.perf_counter()
            index.search(queries[i], k, b, mx_inc)
            first[run, i] = time.perf_counter() - t
            for rd in range(1, rounds + 1):
                t = time.perf_counter()
                index.search(queries[i], k + k * rd, b, mx_inc)
                followup[i].append(time.perf_counter() - t)
        workload.append(time.perf_counter() - t0)
    return WorkloadReport(
        mode="requery",
        k=k,
        runs=runs,
        rounds=rounds,
        cold=first[0].tolist(),
        warm=first[1:].T.tolist(),
        workload=workload,
        followup=followup,
        load_time=load_time,
        b=b,
    )


# -- task completion -----------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    queries: np.ndarray
    ground_truth: frozenset

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.float32)
        if q.ndim == 1:
            q = q.reshape(1, -1)
        if len(q) < 1:
            raise ConfigError(f"task {self.task_id!r} has no queries")
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "ground_truth", frozenset(int(x) for x in self.ground_truth))


def _ids(results) -> set[int]:
    out = set()
    for r in results:
        out.add(int(r.item_id) if hasattr(r, "item_id") else int(r))
    return out


def compute_task_completion(
    results_per_query: Mapping[tuple[str, int], Sequence], tasks: Sequence[TaskSpec]
) -> tuple[int, int]:
    """``(solved, total)``: a task is solved if any of its queries hit its ground truth.

    Keys of ``results_per_query`` are ``(task_id, query_index)``.
    """
    by_id = {t.task_id: t for t in tasks}
    solved: set[str] = set()
    for key, results in results_per_query.items():
        task_id = key[0]
        if task_id not in by_id:
            raise ConfigError(f"query {key!r} does not map to any task")
        if _ids(results) & by_id[task_id].ground_truth:
            solved.add(task_id)
    return len(solved), len(tasks)


def run_tasks(index: Index, tasks: Sequence[TaskSpec], k: int = DEFAULT_K, b: int = DEFAULT_B,
              mx_inc: int = UNLIMITED, exclude=None) -> dict:
    results = {}
    for task in tasks:
        for j, q in enumerate(task.queries):
            results[(task.task_id, j)] = index.search(q, k, b, mx_inc, exclude)
    return results


def load_tasks(path, queries) -> list[TaskSpec]:
    """Tasks from JSON keyed by task id.

    Each value is ``{"query_rows": [...], "ground_truth": [...]}``, or a bare
    list of ground-truth ids, in which case the n-th task in the file uses
    query row n.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: expected an object keyed by task id")
    queries = np.asarray(queries, dtype=np.float32)
    tasks = []
    for n, (task_id, spec) in enumerate(raw.items()):
        if isinstance(spec, list):
            rows, truth = [n], spec
        else:
            rows, truth = spec.get("query_rows", [n]), spec.get("ground_truth", [])
        if any(r >= len(queries) for r in rows):
            raise FormatError(f"{path}: task {task_id!r} references a missing query row")
        tasks.append(TaskSpec(str(task_id), queries[rows], frozenset(truth)))
    return tasks


# -- output ------------------------------------------------------------------


def write_reports(reports: Sequence[WorkloadReport], out_dir, *, stem: str = "bench", extra: dict | None = None,
                  figures: bool = True) -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.csv`` and, optionally, PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv"}
    payload = {"reports": [r.to_dict() for r in reports]}
    if extra:
        payload.update(extra)
    with open(paths["json"], "w") as fh:
        json.dump(payload, fh, indent=2)
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.table_row())
    if figures:
        from . import plotting

        for r in reports:
            paths[f"fig_{r.mode}"] = plotting.latency_figure(r, out_dir / f"{stem}_{r.mode}_latency.png")
        rounds = [r for r in reports if r.rounds]
        if rounds:
            paths["fig_rounds"] = plotting.rounds_figure(rounds, out_dir / f"{stem}_rounds.png")
    return paths
