import shutil
import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import make_two_leaf_index
from ecpfs import IndexConfig, build_index
from ecpfs.cache import CacheConfig
from ecpfs.errors import ConfigError, InvalidQueryError, QueryBusyError, StoreError
from ecpfs.search import brute_force_search, open_index

ALL_LEAVES = 125


@pytest.fixture
def index(index_path):
    idx = open_index(index_path)
    yield idx
    idx.close()


@pytest.fixture
def two_leaf(tmp_path):
    make_two_leaf_index(tmp_path / "two")
    idx = open_index(tmp_path / "two")
    yield idx
    idx.close()


def ids(items):
    return [i.item_id for i in items]


def test_open_reads_no_nodes(index_path):
    idx = open_index(index_path)
    assert idx.cache.stats().misses == 0
    assert idx.store.node_reads == 0
    idx.search(np.zeros(16), k=5)
    assert idx.cache.stats().misses > 0


def test_exhaustive_equals_brute_force(index, vectors, queries):
    for q in queries[:10]:
        assert index.search(q, k=100, b=ALL_LEAVES) == brute_force_search(vectors, q, 100, "l2")


def test_exclusion_shifts_ranks(index, vectors, queries):
    q = queries[0]
    truth = brute_force_search(vectors, q, 20, "l2")
    got = index.search(q, k=10, b=ALL_LEAVES, exclude=ids(truth[:10]))
    assert got == truth[10:]


def test_cosine_self_query(tmp_path, vectors):
    cfg = IndexConfig(2, "cosine", 16, "f32", 2560, 5000, seed=3)
    build_index(vectors, cfg, tmp_path / "cos")
    with open_index(tmp_path / "cos") as idx:
        for row in (0, 17, 4999):
            (top,) = idx.search(vectors[row], k=1, b=ALL_LEAVES)
            assert top.item_id == row
            assert abs(top.distance) <= 1e-6


def test_full_drain_equals_full_ranking(index, vectors, queries):
    q = queries[1]
    truth = brute_force_search(vectors, q, 5000, "l2")
    first, qid = index.new_search(q, k=10, b=ALL_LEAVES)
    got = list(first)
    while True:
        batch = index.get_next_k_items(qid, k=333)
        if not batch:
            break
        got.extend(batch)
    assert got == truth
    assert index.get_next_k_items(qid, k=10) == []
    assert index.state(qid).exhausted


def test_interleaved_queries_do_not_interfere(index, queries):
    def solo(q):
        res, qid = index.new_search(q, k=7, b=3)
        out = [res] + [index.get_next_k_items(qid, k=7) for _ in range(5)]
        index.close_query(qid)
        return out

    expected_a, expected_b = solo(queries[2]), solo(queries[3])
    ra, qa = index.new_search(queries[2], k=7, b=3)
    rb, qb = index.new_search(queries[3], k=7, b=3)
    got_a, got_b = [ra], [rb]
    for _ in range(5):
        got_b.append(index.get_next_k_items(qb, k=7))
        got_a.append(index.get_next_k_items(qa, k=7))
    assert got_a == expected_a and got_b == expected_b


def test_depth_one_b_one_scans_one_leaf(two_leaf):
    res, qid = two_leaf.new_search([0.0, 0.0], k=1, b=1)
    assert ids(res) == [0]
    state = two_leaf.state(qid)
    assert state.leaves_scanned == 1 and state.increments == 0
    assert ids(two_leaf.get_next_k_items(qid, k=1)) == [1]
    assert state.leaves_scanned == 1


def test_filtered_best_leaf_doubles_b(two_leaf):
    res, qid = two_leaf.new_search([0.0, 0.0], k=1, b=1, exclude={0, 1})
    assert ids(res) == [2]
    state = two_leaf.state(qid)
    assert state.increments >= 1 and state.b_current == 2


def test_increment_limit_leaves_buffer_short(two_leaf):
    res, qid = two_leaf.new_search([0.0, 0.0], k=1, b=1)
    assert ids(res) == [0]
    state = two_leaf.state(qid)
    two_leaf.incremental_search(qid, k=5, mx_inc=0, exclude={2, 3})
    assert state.increments == 0 and state.leaves_scanned == 2
    assert state.buffered == 1
    assert ids(two_leaf.get_next_k_items(qid, k=5)) == [1]


def test_new_search_drain_resumes_after_limit(two_leaf):
    # the drain step refills a short buffer, so the filtered leaf is followed by the next one
    res, qid = two_leaf.new_search([0.0, 0.0], k=1, b=1, mx_inc=0, exclude={0, 1})
    assert ids(res) == [2]
    assert two_leaf.state(qid).increments == 0


def test_b_override(index, queries):
    _, qid = index.new_search(queries[4], k=1, b=1)
    state = index.state(qid)
    before = state.leaves_scanned
    index.get_next_k_items(qid, k=10_000, b=2, mx_inc=0)
    assert state.leaves_scanned - before == 2


def test_persisted_state_continues_identically(index, index_path, queries, tmp_path):
    _, qid = index.new_search(queries[5], k=25, b=4)
    saved = index.save_query_state(qid, tmp_path / "qs")
    with open_index(index_path) as other:
        restored = other.load_query_state(saved)
        for k in (10, 40, 7, 200):
            assert other.get_next_k_items(restored, k) == index.get_next_k_items(qid, k)
        assert other.state(restored).leaves_scanned == index.state(qid).leaves_scanned


def test_state_persist_roundtrip_fields(index, queries, tmp_path):
    _, qid = index.new_search(queries[6], k=3, b=2)
    original = index.state(qid)
    loaded = index.state(index.load_query_state(index.save_query_state(qid, tmp_path / "s")))
    assert loaded.queue == original.queue
    np.testing.assert_array_equal(loaded.item_ids, original.item_ids)
    np.testing.assert_array_equal(loaded.item_distances, original.item_distances)
    np.testing.assert_array_equal(loaded.query, original.query)
    assert (loaded.b_current, loaded.increments, loaded.leaves_scanned) == (
        original.b_current, original.increments, original.leaves_scanned,
    )


def test_truncated_state_rejected(index, queries, tmp_path):
    _, qid = index.new_search(queries[7], k=3, b=2)
    path = index.save_query_state(qid, tmp_path / "s")
    chunk = path / "queue_node" / "0"
    chunk.write_bytes(chunk.read_bytes()[:-5])
    with pytest.raises(StoreError):
        index.load_query_state(path)
    shutil.rmtree(path / "item_id")
    with pytest.raises(StoreError):
        index.load_query_state(path)


def test_state_from_other_index_rejected(index, two_leaf, tmp_path):
    _, qid = two_leaf.new_search([0.0, 0.0], k=1, b=1)
    path = two_leaf.save_query_state(qid, tmp_path / "s")
    with pytest.raises(StoreError, match="different index"):
        index.load_query_state(path)


@pytest.mark.parametrize("bad", [-1, 999, "x", None])
def test_invalid_query_id(index, bad):
    with pytest.raises(InvalidQueryError):
        index.get_next_k_items(bad, 5)


def test_closed_query_id_invalid(index, queries):
    _, qid = index.new_search(queries[0], k=1)
    index.close_query(qid)
    with pytest.raises(InvalidQueryError):
        index.get_next_k_items(qid, 1)
    _, qid2 = index.new_search(queries[0], k=1)
    assert qid2 != qid


def test_concurrent_drive_rejected(index, queries):
    _, qid = index.new_search(queries[0], k=1)
    state = index.state(qid)
    with state.driving():
        with pytest.raises(QueryBusyError):
            index.get_next_k_items(qid, 1)


def test_separate_queries_run_in_parallel(index, vectors, queries):
    results = {}

    def run(i):
        results[i] = index.search(queries[i], k=20, b=ALL_LEAVES)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(8):
        assert results[i] == brute_force_search(vectors, queries[i], 20, "l2")


@pytest.mark.parametrize("kwargs", [dict(k=0), dict(b=0), dict(mx_inc=-2)])
def test_bad_parameters(index, kwargs):
    with pytest.raises(ConfigError):
        index.new_search(np.zeros(16), **kwargs)


def test_bad_query_vector(index):
    with pytest.raises(ValueError, match="dim"):
        index.search(np.zeros(15))
    with pytest.raises(ValueError, match="non-finite"):
        index.search(np.full(16, np.nan))


def test_every_node_popped_once(index, queries):
    index.record_pops = True
    _, qid = index.new_search(queries[8], k=1, b=1)
    while index.get_next_k_items(qid, k=97):
        pass
    popped = index.state(qid).popped
    assert len(popped) == len(set(popped)) == 11 + 125


def test_works_with_caching_disabled(index_path, vectors, queries):
    with open_index(index_path, CacheConfig(caching_enabled=False)) as idx:
        assert idx.search(queries[9], k=30, b=ALL_LEAVES) == brute_force_search(vectors, queries[9], 30, "l2")
        assert idx.cache.stats().resident_nodes == 0


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    row=st.integers(0, 49),
    b=st.integers(1, 20),
    ks=st.lists(st.integers(1, 400), min_size=1, max_size=8),
)
def test_any_drain_schedule_is_duplicate_free(index, queries, row, b, ks):
    first, qid = index.new_search(queries[row], k=ks[0], b=b)
    seen = ids(first)
    assert len(first) == ks[0]
    for k in ks[1:]:
        batch = index.get_next_k_items(qid, k)
        assert len(batch) == min(k, 5000 - len(seen))
        seen.extend(ids(batch))
    while True:
        batch = index.get_next_k_items(qid, 1000)
        if not batch:
            break
        seen.extend(ids(batch))
    assert sorted(seen) == list(range(5000))
    index.close_query(qid)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(row=st.integers(0, 49), ks=st.lists(st.integers(1, 150), min_size=1, max_size=6))
def test_exhaustive_schedule_matches_brute_force_prefix(index, vectors, queries, row, ks):
    first, qid = index.new_search(queries[row], k=ks[0], b=ALL_LEAVES)
    got = list(first)
    for k in ks[1:]:
        got.extend(index.get_next_k_items(qid, k))
    index.close_query(qid)
    assert got == brute_force_search(vectors, queries[row], sum(ks), "l2")


def test_drained_state_reloads_empty(two_leaf, tmp_path):
    _, qid = two_leaf.new_search([0.0, 0.0], k=10, b=1)
    assert two_leaf.state(qid).exhausted
    restored = two_leaf.load_query_state(two_leaf.save_query_state(qid, tmp_path / "d"))
    assert two_leaf.get_next_k_items(restored, 5) == []
