"""``ecpfs`` command line: build, query, next, inspect, bench.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    load_tasks,
    compute_task_completion,
    run_incremental_workload,
    run_requery_baseline,
    run_single_query_workload,
    run_tasks,
    timed_open,
    write_reports,
)
from .builder import build_index
from .cache import CacheConfig
from .core import IndexConfig, Metric, StorageDtype
from .datasets import VectorFormat, ingest_vectors, read_id_list
from .errors import EcpfsError, InvalidQueryError, StoreError
from .search import DEFAULT_B, DEFAULT_K, init_state_dir, next_state_id, open_index, state_path
from .store import NodeRef, Store

log = logging.getLogger("ecpfs")

ENV_CACHE_NODES = "ECPFS_CACHE_NODES"
ENV_NO_CACHE = "ECPFS_NO_CACHE"
ENV_PREFETCH = "ECPFS_PREFETCH_LEVEL"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def _cache_config(args) -> CacheConfig:
    nodes = args.cache_nodes
    if nodes is None and os.environ.get(ENV_CACHE_NODES):
        nodes = int(os.environ[ENV_CACHE_NODES])
    no_cache = args.no_cache or _env_flag(ENV_NO_CACHE)
    prefetch = args.prefetch_level
    if prefetch is None and os.environ.get(ENV_PREFETCH):
        prefetch = int(os.environ[ENV_PREFETCH])
    if no_cache:
        return CacheConfig(capacity_nodes=nodes, caching_enabled=False, prefetch_to_level=None)
    if nodes == 0:
        raise EcpfsError("--cache-nodes 0 needs --no-cache")
    return CacheConfig(capacity_nodes=nodes, prefetch_to_level=prefetch)


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=_json_default))
    else:
        print("\n".join(lines))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _load_query(path, row: int, fmt) -> np.ndarray:
    data = ingest_vectors(path, fmt)
    if not 0 <= row < data.n_items:
        raise EcpfsError(f"query row {row} outside 0..{data.n_items - 1} of {path}")
    return np.asarray(data.rows(row), dtype=np.float32)


def _results_payload(results) -> list[dict]:
    return [{"rank": i, "item_id": r.item_id, "distance": r.distance} for i, r in enumerate(results)]


def _results_lines(results) -> list[str]:
    return [f"{i}\t{r.item_id}\t{r.distance:.6g}" for i, r in enumerate(results)]


# -- commands ------------------------------------------------------------------


def cmd_build(args) -> int:
    dataset = ingest_vectors(args.input, args.format)
    config = IndexConfig(
        depth=args.levels,
        metric=args.metric,
        dim=dataset.dim,
        storage_dtype=args.dtype,
        target_cluster_bytes=args.cluster_bytes,
        n_items=dataset.n_items,
        seed=args.seed,
    )
    report = build_index(dataset, config, args.out, buffer_rows=args.buffer_rows)
    info = report.to_dict()
    _emit(
        args,
        info,
        [
            f"built {args.out}",
            f"n_items={report.n_items} items_per_cluster={report.params.items_per_cluster} "
            f"n_leaders={report.params.n_leaders} fanout={report.params.fanout}",
            f"node_counts={report.node_counts}",
            f"cluster sizes: min={report.min_cluster} mean={report.mean_cluster:.2f} "
            f"max={report.max_cluster} empty={info['empty_clusters']}",
            f"time={report.timings['total']:.3f}s",
        ],
    )
    return 0


def _exclusions(args):
    return read_id_list(args.exclude_file) if args.exclude_file else None


def cmd_query(args) -> int:
    q = _load_query(args.query_file, args.row, args.format)
    with open_index(args.index, _cache_config(args)) as index:
        results, qid = index.new_search(q, args.k, args.b, args.max_inc, _exclusions(args))
        saved = None
        if args.state_dir:
            init_state_dir(args.state_dir)
            local, qid = qid, next_state_id(args.state_dir)
            saved = index.save_query_state(local, state_path(args.state_dir, qid))
    payload = {"query_id": qid, "results": _results_payload(results)}
    if saved:
        payload["state"] = str(saved)
    _emit(args, payload, [f"query_id={qid}", *_results_lines(results)])
    return 0


def cmd_next(args) -> int:
    path = state_path(args.state_dir, args.query_id)
    if not path.is_dir():
        raise InvalidQueryError(f"unknown query id {args.query_id} in {args.state_dir}")
    with open_index(args.index, _cache_config(args)) as index:
        local = index.load_query_state(path)
        results = index.get_next_k_items(local, args.k, args.b, args.max_inc, _exclusions(args))
        index.save_query_state(local, path)
    payload = {"query_id": args.query_id, "results": _results_payload(results)}
    _emit(args, payload, [f"query_id={args.query_id}", *_results_lines(results)])
    return 0


def _histogram(sizes: np.ndarray, bins: int) -> list[dict]:
    if sizes.size == 0:
        return []
    lo, hi = int(sizes.min()), int(sizes.max())
    edges = np.linspace(lo, hi + 1, min(bins, hi - lo + 1) + 1)
    which = np.clip(np.searchsorted(edges, sizes, side="right") - 1, 0, len(edges) - 2)
    out = []
    for b in range(len(edges) - 1):
        sel = which == b
        out.append({
            "lo": int(np.ceil(edges[b])),
            "hi": int(np.ceil(edges[b + 1])) - 1,
            "clusters": int(sel.sum()),
            "items": int(sizes[sel].sum()),
        })
    return out


def cmd_inspect(args) -> int:
    store = Store.open(args.index)
    m = store.manifest
    if args.node is not None and args.level is None:
        raise EcpfsError("--node requires --level")
    if args.level is not None and args.node is not None:
        return _inspect_node(args, store)

    levels = range(1, m.depth + 1) if args.level is None else [args.level]
    if args.level is not None and not 0 <= args.level <= m.depth:
        raise StoreError(f"level {args.level} outside 0..{m.depth}")
    per_level = {}
    for level in levels:
        if level == 0:
            per_level[0] = {"nodes": 1, "sizes": [len(store.read_root())]}
            continue
        sizes = [store.node_size(NodeRef(level, i)) for i in range(m.node_count(level))]
        per_level[level] = {"nodes": m.node_count(level), "sizes": sizes}
    leaf_sizes = np.array(
        per_level[m.depth]["sizes"] if m.depth in per_level
        else [store.node_size(NodeRef(m.depth, i)) for i in range(m.node_count(m.depth))],
        dtype=np.int64,
    )
    hist = _histogram(leaf_sizes, args.bins)
    payload = {
        "path": str(store.path),
        "manifest": m.to_attrs(),
        "levels": {str(k): {"nodes": v["nodes"], "written": len(store.written_nodes(k)) if k else 1}
                   for k, v in per_level.items()},
        "cluster_sizes": leaf_sizes.tolist(),
        "total_items": int(leaf_sizes.sum()),
        "nonempty_clusters": int((leaf_sizes > 0).sum()),
        "largest_cluster": int(leaf_sizes.max()) if leaf_sizes.size else 0,
        "histogram": hist,
    }
    lines = [f"index {store.path}"]
    lines += [f"  {k}: {v}" for k, v in m.to_attrs().items()]
    lines.append("levels:")
    for k, v in payload["levels"].items():
        lines.append(f"  lvl_{k}: {v['nodes']} nodes ({v['written']} on disk)")
    lines.append(
        f"clusters: {leaf_sizes.size} total, {payload['nonempty_clusters']} non-empty, "
        f"largest holds {payload['largest_cluster']} items, {payload['total_items']} items overall"
    )
    lines.append("cluster size histogram (size range: clusters / items):")
    for h in hist:
        lines.append(f"  {h['lo']:>7}-{h['hi']:<7} {h['clusters']:>7} / {h['items']}")
    if args.plot:
        from .plotting import cluster_size_figure

        payload["figure"] = str(cluster_size_figure(leaf_sizes, args.plot))
        lines.append(f"figure: {payload['figure']}")
    _emit(args, payload, lines)
    return 0


def _inspect_node(args, store: Store) -> int:
    m = store.manifest
    if args.level == 0:
        data, label = store.read_root(), "index_root"
    else:
        ref = NodeRef(args.level, args.node)
        if not 1 <= args.level <= m.depth or not 0 <= args.node < m.node_count(args.level):
            raise StoreError(f"no such node {ref}")
        data, label = store.read_node(ref), str(ref)
    ids = data.item_ids.tolist()
    kind = "items" if args.level == m.depth else "children"
    payload = {"node": label, "kind": kind, "count": len(ids), "ids": ids}
    lines = [f"{label}: {len(ids)} {kind}"]
    if ids:
        lines.append(" ".join(str(i) for i in ids))
    _emit(args, payload, lines)
    return 0


def cmd_bench(args) -> int:
    queries = ingest_vectors(args.queries, args.format).to_numpy().astype(np.float32)
    if args.limit:
        queries = queries[: args.limit]
    index, load_time = timed_open(args.index, _cache_config(args))
    reports = []
    extra = {"index": str(args.index), "n_queries": len(queries)}
    with index:
        if args.mode == "single":
            reports.append(run_single_query_workload(
                index, queries, args.k, args.runs, b=args.b, mx_inc=args.max_inc,
                workers=args.workers, load_time=load_time))
        else:
            reports.append(run_incremental_workload(
                index, queries, args.k, args.rounds, args.runs, b=args.b, mx_inc=args.max_inc,
                load_time=load_time))
            if args.baseline:
                reports.append(run_requery_baseline(
                    index, queries, args.k, args.rounds, args.runs, b=args.b, mx_inc=args.max_inc,
                    load_time=load_time))
        if args.ground_truth:
            tasks = load_tasks(args.ground_truth, queries)
            solved, total = compute_task_completion(run_tasks(index, tasks, args.k, args.b, args.max_inc), tasks)
            extra["tasks"] = {"solved": solved, "total": total}
    paths = write_reports(reports, args.out_dir, stem=args.stem, extra=extra, figures=not args.no_figures)

    payload = {"reports": [r.table_row() for r in reports], "outputs": {k: str(v) for k, v in paths.items()}}
    payload.update(extra)
    lines = ["mode          load(s)    disk(s)    memory(s)  followup(s)  workload(s)  workload_mem(s)"]
    for r in reports:
        row = r.table_row()
        lines.append(
            f"{row['mode']:<13} {row['load_time']:<10.4f} {row['disk']:<10.5f} {row['memory']:<10.5f} "
            f"{row['followup']:<12.6f} {row['workload']:<12.4f} {row['workload_memory']:.4f}"
        )
    if "tasks" in extra:
        lines.append(f"tasks solved: {extra['tasks']['solved']}/{extra['tasks']['total']}")
    lines += [f"wrote {p}" for p in paths.values()]
    _emit(args, payload, lines)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    cache = argparse.ArgumentParser(add_help=False)
    cache.add_argument("--cache-nodes", type=_nonneg_int, default=None,
                       help=f"max resident nodes (default unbounded; env {ENV_CACHE_NODES})")
    cache.add_argument("--no-cache", action="store_true", help=f"do not retain nodes (env {ENV_NO_CACHE})")
    cache.add_argument("--prefetch-level", type=_nonneg_int, default=None,
                       help=f"load all nodes up to this level at open (env {ENV_PREFETCH})")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--max-inc", type=int, default=-1, help="times b may double; -1 = unlimited")
    search.add_argument("--exclude-file", help="item ids to filter out (JSON list or whitespace separated)")

    parser = argparse.ArgumentParser(prog="ecpfs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ecpfs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common], help="build an index from a vector file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", type=VectorFormat.parse, default=None, help="fbin | fvecs | raw_f16")
    p.add_argument("--levels", type=_positive_int, default=2)
    p.add_argument("--cluster-bytes", type=_positive_int, default=131072)
    p.add_argument("--metric", type=Metric.parse, default=Metric.L2, help="l2 | cosine | ip")
    p.add_argument("--dtype", type=StorageDtype.parse, default=StorageDtype.F32, help="f16 | f32")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--buffer-rows", type=_positive_int, default=1 << 20,
                   help="assigned rows held in memory before spilling buckets to disk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", parents=[common, cache, search], help="start a new search")
    p.add_argument("--index", required=True)
    p.add_argument("--query-file", required=True)
    p.add_argument("--row", type=_nonneg_int, default=0, help="row of the query file to use")
    p.add_argument("--format", type=VectorFormat.parse, default=None)
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--b", type=_positive_int, default=DEFAULT_B)
    p.add_argument("--state-dir", help="persist the query state here so `next` can resume it")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("next", parents=[common, cache, search], help="next batch of a persisted query")
    p.add_argument("--index", required=True)
    p.add_argument("--query-id", type=_nonneg_int, required=True)
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--b", type=_positive_int, default=None, help="override the query's current b")
    p.add_argument("--state-dir")
    p.set_defaults(func=cmd_next)

    p = sub.add_parser("inspect", parents=[common], help="show index structure")
    p.add_argument("--index", required=True)
    p.add_argument("--level", type=_nonneg_int, default=None, help="0 is the root")
    p.add_argument("--node", type=_nonneg_int, default=None)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--plot", help="write a cluster-size histogram PNG here")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", parents=[common, cache], help="run a latency workload")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query vectors (fbin)")
    p.add_argument("--format", type=VectorFormat.parse, default=None)
    p.add_argument("--mode", choices=["single", "incremental"], default="single")
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--b", type=_positive_int, default=DEFAULT_B)
    p.add_argument("--max-inc", type=int, default=-1)
    p.add_argument("--runs", type=_positive_int, default=10)
    p.add_argument("--rounds", type=_positive_int, default=10)
    p.add_argument("--limit", type=_positive_int, default=None, help="use only the first N queries")
    p.add_argument("--baseline", action="store_true",
                   help="incremental mode: also run the growing-k re-query baseline")
    p.add_argument("--workers", type=_nonneg_int, default=0, help="single mode: parallel queries (throughput only)")
    p.add_argument("--ground-truth", help="task JSON for task-completion scoring")
    p.add_argument("--out-dir", default="bench_out")
    p.add_argument("--stem", default="bench")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "next" and not args.state_dir:
        parser.error("next needs --state-dir: query states only survive between CLI runs when persisted "
                     "(pass the same --state-dir to `query` first)")
    if args.command == "bench" and args.mode == "single" and args.runs < 2:
        parser.error("single-query bench needs --runs >= 2 to split cold and warm latencies")
    try:
        return args.func(args)
    except (EcpfsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
