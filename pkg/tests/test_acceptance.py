"""The ten acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``conftest.ACCEPTANCE_LINES`` which the
terminal summary prints at the end of the run.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from conftest import make_two_leaf_index
from ecpfs import IndexConfig, build_index, compute_index_params, estimated_query_cost
from ecpfs.bench import run_incremental_workload, run_requery_baseline, run_single_query_workload
from ecpfs.cache import CacheConfig, NodeCache
from ecpfs.cli import main
from ecpfs.search import brute_force_search, open_index
from ecpfs.store import IndexManifest, NodeRef, Store, read_array


def record(number, title, ok, detail, elapsed=None, limit=None):
    if limit is not None and elapsed is not None and elapsed >= limit:
        ok = False
        detail += f"; took {elapsed:.1f}s, limit {limit}s"
    timing = f" [{elapsed:.2f}s]" if elapsed is not None else ""
    conftest.ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}: {detail}{timing}")
    print(conftest.ACCEPTANCE_LINES[-1])
    assert ok, detail


def test_c01_parameter_math():
    t = time.perf_counter()
    cfg = IndexConfig(3, "l2", 1152, "f16", 131072, 10**6)
    p = compute_index_params(cfg)
    cost = estimated_query_cost(p, 3, 1)
    got = (p.items_per_cluster, p.n_leaders, p.fanout, cost)
    record(1, "parameter math", got == (57, 17544, 26, 135),
           f"ipc/leaders/fanout/cost = {got}, want (57, 17544, 26, 135)", time.perf_counter() - t, 1)


def test_c02_oracle_recall(index_path, vectors, queries):
    t = time.perf_counter()
    with open_index(index_path) as idx:
        n_leaders = idx.manifest.params.n_leaders
        exact = 0
        for q in queries:
            got = idx.search(q, k=100, b=n_leaders, mx_inc=-1)
            exact += got == brute_force_search(vectors, q, 100, "l2")
    record(2, "oracle recall", exact == len(queries) == 50,
           f"{exact}/50 queries reproduce brute-force top-100 ids and order", time.perf_counter() - t, 30)


def test_c03_incremental_consistency(index_path, queries):
    t = time.perf_counter()
    rng = np.random.default_rng(conftest.FIXTURE_SEED + 3)
    excl = set(rng.choice(conftest.N_ITEMS, size=50, replace=False).tolist())
    dups = mismatched = leaked = 0
    with open_index(index_path) as idx:
        for q in queries:
            for e in (None, excl):
                first, qid = idx.new_search(q, k=10, exclude=e)
                got = [r.item_id for r in first]
                for _ in range(9):
                    got += [r.item_id for r in idx.get_next_k_items(qid, 10, exclude=e)]
                idx.close_query(qid)
                one_shot = {r.item_id for r in idx.search(q, k=100, exclude=e)}
                dups += len(got) - len(set(got))
                mismatched += set(got) != one_shot
                if e is not None:
                    leaked += len(set(got) & e)
    record(3, "incremental consistency", dups == mismatched == leaked == 0,
           f"duplicates={dups} set mismatches vs one-shot={mismatched} excluded ids returned={leaked}",
           time.perf_counter() - t, 60)


def test_c04_b_doubling_under_filter(tmp_path):
    t = time.perf_counter()
    make_two_leaf_index(tmp_path / "two")
    with open_index(tmp_path / "two") as idx:
        res, qid = idx.new_search([0.0, 0.0], k=1, b=1, mx_inc=4, exclude={0, 1})
        inc = idx.state(qid).increments
    ok = [r.item_id for r in res] in ([2], [3]) and inc >= 1
    record(4, "b-doubling under filters", ok,
           f"returned {[r.item_id for r in res]} from the second leaf, increments={inc}", time.perf_counter() - t, 1)


def test_c05_cache_bound(index_path):
    t = time.perf_counter()
    store = Store.open(index_path)
    cache = NodeCache(store, CacheConfig(capacity_nodes=8))
    cache.record_evictions = True
    rng = np.random.default_rng(5)
    order: list = []  # reference LRU, most recent last
    peak = 0
    mismatches = 0
    for level, node in zip(rng.integers(1, 3, 1000), rng.integers(0, 11, 1000)):
        ref = NodeRef(int(level), int(node))
        n_evicted = len(cache.evicted)
        cache.get_node(ref)
        expected_evict = None
        if ref in order:
            order.remove(ref)
        elif len(order) == 8:
            expected_evict = order.pop(0)
        order.append(ref)
        actual = cache.evicted[n_evicted:]
        mismatches += actual != ([expected_evict] if expected_evict else [])
        mismatches += cache.resident() != order
        peak = max(peak, cache.stats().resident_nodes)
    record(5, "cache bound", peak <= 8 and mismatches == 0,
           f"peak residency {peak} (cap 8), {mismatches} deviations from reference LRU over 1000 accesses, "
           f"{cache.stats().evictions} evictions", time.perf_counter() - t, 5)


def test_c06_lazy_open(index_path, queries):
    t = time.perf_counter()
    idx = open_index(index_path)
    nodes = idx.manifest.node_count(2)
    before = (idx.cache.stats().misses, idx.store.node_reads, idx.cache.stats().resident_nodes)
    idx.search(queries[0], k=10)
    after = idx.cache.stats().misses
    idx.close()
    record(6, "lazy open", nodes == 125 and before == (0, 0, 0) and after > 0,
           f"{nodes}-leaf index: misses/node reads/resident after open = {before}, misses after first query = {after}",
           time.perf_counter() - t, 1)


def test_c07_format_interoperability(index_path):
    zarr = pytest.importorskip("zarr")
    t = time.perf_counter()
    root = Path(index_path)
    group = zarr.open_group(str(root), mode="r")
    checked = bad = 0
    for zarray in sorted(root.rglob(".zarray")):
        rel = zarray.parent.relative_to(root).as_posix()
        ours = read_array(zarray.parent)
        theirs = group[rel]
        same = theirs.shape == ours.shape and theirs.dtype == ours.dtype and np.array_equal(theirs[:], ours)
        bad += not same
        checked += 1
    manifest = Store.open(index_path).manifest
    attrs = dict(group["info"].attrs)
    round_trip = IndexManifest.from_attrs(json.loads(json.dumps(attrs))) == manifest
    record(7, "format interoperability", bad == 0 and checked == 2 * (1 + 11 + 125 + 1) and round_trip,
           f"{checked} arrays read by zarr, {bad} differ; manifest round-trip {'ok' if round_trip else 'FAILED'}",
           time.perf_counter() - t, 10)


def _id_files(root: Path) -> dict:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.name.startswith(".") and p.parent.name in ("item_ids", "rep_item_ids")
    }


def test_c08_determinism(tmp_path, vectors, config, queries):
    t = time.perf_counter()
    build_index(vectors, config, tmp_path / "a")
    build_index(vectors, config, tmp_path / "b")
    a, b = _id_files(tmp_path / "a"), _id_files(tmp_path / "b")
    same_build = a == b and len(a) == 1 + 11 + 125 + 1
    with open_index(tmp_path / "a") as idx:
        _, qid = idx.new_search(queries[0], k=10, b=2)
        saved = idx.save_query_state(qid, tmp_path / "qs")
        drains = []
        for _ in range(2):
            restored = idx.load_query_state(saved)
            drains.append([idx.get_next_k_items(restored, 37) for _ in range(20)])
    same_drain = drains[0] == drains[1] and sum(map(len, drains[0])) == 20 * 37
    record(8, "determinism", same_build and same_drain,
           f"{len(a)} id arrays byte-identical across builds: {a == b}; "
           f"two drains of one saved state identical: {drains[0] == drains[1]}",
           time.perf_counter() - t, 60)


@pytest.mark.slow
def test_c09_directional_latency(tmp_path):
    t = time.perf_counter()
    n, dim = 100_000, 32
    rng = np.random.default_rng(conftest.FIXTURE_SEED + 9)
    data = rng.standard_normal((n, dim)).astype(np.float32)
    qs = rng.standard_normal((20, dim)).astype(np.float32)
    # 100 items per cluster -> 1000 leaders, fanout 32
    cfg = IndexConfig(2, "l2", dim, "f32", 100 * dim * 4, n, seed=1)
    build_index(data, cfg, tmp_path / "big")
    with open_index(tmp_path / "big") as idx:
        single = run_single_query_workload(idx, qs, k=100, runs=3)
        inc = run_incremental_workload(idx, qs, k=100, rounds=10, runs=1)
        base = run_requery_baseline(idx, qs, k=100, rounds=10, runs=1)
    warm_ok = single.warm_mean < single.cold_mean
    inc_ok = inc.workload_total < base.workload_total
    record(9, "directional latency", warm_ok and inc_ok,
           f"{n} vectors: warm mean {single.warm_mean * 1e3:.2f} ms vs cold mean {single.cold_mean * 1e3:.2f} ms; "
           f"incremental workload {inc.workload_total:.3f} s vs re-query baseline {base.workload_total:.3f} s "
           f"(rounds=10)", time.perf_counter() - t)


def test_c10_skew_robustness(tmp_path, capsys):
    t = time.perf_counter()
    vec = np.tile(np.array([[1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -0.25, 2.0]], dtype=np.float32), (10_000, 1))
    cfg = IndexConfig(2, "l2", 8, "f32", 8 * 4 * 40, 10_000, seed=0)
    build_index(vec, cfg, tmp_path / "skew")
    capsys.readouterr()
    code = main(["inspect", "--index", str(tmp_path / "skew"), "--json"])
    payload = json.loads(capsys.readouterr().out)
    ok = code == 0 and payload["nonempty_clusters"] == 1 and payload["largest_cluster"] == 10_000
    record(10, "skew robustness", ok,
           f"inspect: {payload['nonempty_clusters']} non-empty of {len(payload['cluster_sizes'])} clusters, "
           f"largest holds {payload['largest_cluster']} of 10000 items", time.perf_counter() - t)
