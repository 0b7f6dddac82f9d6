import io
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stallann.clock import VirtualClock
from stallann.costs import CostModel
from stallann.graph_index import DimensionMismatch, GraphIndex, IndexConfig, UnknownId
from stallann.quantizer import ScalarQuantizer
from stallann.update_engine import (
    MalformedOps,
    TaskKind,
    UpdateEngine,
    apply_delete_sync,
    apply_insert_sync,
    read_update_ops,
    replay_commits,
    submit_ops,
)


@pytest.fixture(scope="module")
def thousand():
    rng = np.random.default_rng(21)
    data = rng.normal(size=(1100, 12)).astype(np.float32)
    return data, GraphIndex.build(data[:1000], IndexConfig(dim=12, R=12, L_build=24))


def hand_index(vectors, adjacency, R=4):
    vectors = np.asarray(vectors, dtype=np.float32)
    idx = GraphIndex.empty(IndexConfig(dim=vectors.shape[1], R=R), ScalarQuantizer.fit(vectors))
    for v in vectors:
        idx.allocate(v)
    for v, nbrs in enumerate(adjacency):
        idx.set_neighbors(v, nbrs)
    return idx


def no_tombstone_refs(idx):
    return all(not (set(idx.adjacency[v]) & idx.tombstones) for v in idx.live_ids())


def test_insert_into_empty_index():
    q = ScalarQuantizer.fit(np.array([[0.0, 0.0], [1.0, 1.0]]))
    idx = GraphIndex.empty(IndexConfig(dim=2, R=4), q)
    eng = UpdateEngine(idx)
    op = eng.submit_insert([0.5, 0.5])
    eng.drain(VirtualClock())
    assert op.done and idx.count == 1 and idx.adjacency == [[]] and idx.entry_point == 0
    assert eng.queue.enqueued == 1


def test_reverse_repairs_are_appends_below_R():
    data = np.random.default_rng(1).normal(size=(40, 3)).astype(np.float32)
    idx = GraphIndex.build(data, IndexConfig(dim=3, R=64))
    eng = UpdateEngine(idx)
    eng.submit_insert(np.zeros(3))
    eng.drain(VirtualClock())
    p = idx.count - 1
    reverse = [c for c in eng.commits if c.vid != p]
    assert reverse and all(c.kind == "append" and c.value == (p,) for c in reverse)
    assert all(p in idx.adjacency[u] for u in idx.adjacency[p])


def test_hundred_inserts_match_sync(thousand):
    data, base = thousand
    a, b = base.clone(), base.clone()
    eng = UpdateEngine(a)
    clock = VirtualClock()
    for v in data[1000:1100]:
        eng.submit_insert(v)
        eng.drain(clock)
        apply_insert_sync(b, v)
    assert a.snapshot() == b.snapshot()
    assert a.max_degree() <= a.R


def test_batched_inserts_under_small_budgets_replay(thousand):
    data, base = thousand
    idx = base.clone()
    before = idx.snapshot()
    eng = UpdateEngine(idx)
    for v in data[1000:1050]:
        eng.submit_insert(v)
    clock = VirtualClock()
    rng = np.random.default_rng(0)
    while eng.pending_count():
        assert eng.run_slice(float(rng.uniform(1, 30)), clock).ran
        assert idx.max_degree() <= idx.R
    assert eng.yields > 0
    assert replay_commits(idx.vectors, before, eng.commits, idx.cfg.alpha_prune, idx.R) == idx.snapshot()
    assert idx.reachable() >= set(range(1000, 1050))


def test_delete_zero_in_edges():
    idx = hand_index([[0, 0], [1, 0], [5, 5]], [[1], [0], [0]])
    eng = UpdateEngine(idx)
    op = eng.submit_delete([2])
    assert 2 in idx.tombstones
    eng.drain(VirtualClock())
    assert op.done and eng.queue.enqueued == 1
    assert not any(c.kind == "freeze" for c in eng.commits)


def test_delete_triangle():
    idx = hand_index([[0, 0], [1, 0], [0, 1]], [[1, 2], [0, 2], [0, 1]])
    eng = UpdateEngine(idx)
    eng.submit_delete([2])
    eng.drain(VirtualClock())
    assert idx.adjacency[0] == [1] and idx.adjacency[1] == [0]
    assert [c.vid for c in eng.commits if c.kind == "set"] == [0, 1]


@pytest.mark.parametrize("budget", [math.inf, 3.0])
def test_five_percent_delete_matches_sync(thousand, budget):
    _, base = thousand
    a, b = base.clone(), base.clone()
    ids = np.random.default_rng(4).choice(1000, 50, replace=False).tolist()
    eng = UpdateEngine(a)
    op = eng.submit_delete(ids)
    eng.drain(VirtualClock(), budget)
    apply_delete_sync(b, ids)
    assert op.done
    assert a.snapshot() == b.snapshot()
    assert no_tombstone_refs(a)


def test_delete_unknown_or_dead_id(small_index):
    eng = UpdateEngine(small_index)
    with pytest.raises(UnknownId):
        eng.submit_delete([small_index.count])
    eng.submit_delete([5])
    with pytest.raises(UnknownId):
        eng.submit_delete([5])


def test_insert_dim_mismatch(small_index):
    with pytest.raises(DimensionMismatch):
        UpdateEngine(small_index).submit_insert(np.zeros(3))


def test_empty_queue_and_zero_budget(small_index):
    eng = UpdateEngine(small_index)
    assert not eng.run_slice(100.0, VirtualClock()).ran
    eng.submit_insert(np.zeros(8))
    assert not eng.run_slice(0.0, VirtualClock()).ran
    assert eng.pending_count() == 1


def test_pending_count_accounting(small_index, small_data):
    eng = UpdateEngine(small_index)
    assert eng.pending_count() == 0
    ops = [eng.submit_insert(v + 0.05) for v in small_data[:5]]
    assert eng.pending_count() == 5
    clock = VirtualClock()
    while True:
        assert (eng.pending_count() == 0) == all(op.done for op in ops)
        if not eng.run_slice(5.0, clock).ran:
            break
    assert all(op.done for op in ops)


def test_overshoot_bound(small_index, small_data):
    cost = CostModel()
    eng = UpdateEngine(small_index, cost)
    for v in small_data[:10]:
        eng.submit_insert(v + 0.1)
    eng.submit_delete(range(20, 35))
    R = small_index.R
    # one prune iteration plus the largest lightweight phase: freezing a delete pool or a write
    slack = cost.prune_iteration_us + cost.update_distance_us * (R + R * R) + cost.write_record_us
    clock = VirtualClock()
    while eng.pending_count():
        t0 = clock.now()
        eng.run_slice(4.0, clock)
        assert clock.now() - t0 <= 4.0 + slack


def test_failed_task_marks_op(small_index):
    eng = UpdateEngine(small_index)
    op = eng.submit_insert(np.zeros(8))
    task = eng.queue._q[0]
    task.phase = "bogus"
    task.kind = TaskKind.DELETE_REPAIR
    task.pool = [10**6]
    r = eng.run_slice(100.0, VirtualClock())
    assert r.ran and r.error is not None
    assert op.failed and op.done and eng.failed_ops == 1 and eng.pending_count() == 0


ops_strategy = st.lists(st.tuples(st.sampled_from(["I", "D"]), st.integers(0, 10**6)), min_size=1, max_size=12)


@settings(max_examples=25)
@given(ops_strategy, st.lists(st.floats(0.5, 40), min_size=1, max_size=50))
def test_conservation_degree_hygiene_replay(small_index_master, ops, budgets):
    idx = small_index_master.clone()
    before = idx.snapshot()
    eng = UpdateEngine(idx)
    rng = np.random.default_rng(ops[0][1])
    for kind, seed in ops:
        if kind == "I":
            eng.submit_insert(rng.normal(size=8))
        else:
            live = idx.live_ids()
            eng.submit_delete(rng.choice(live, 3, replace=False).tolist())
    clock = VirtualClock()
    k = 0
    while eng.pending_count():
        eng.run_slice(budgets[k % len(budgets)], clock)
        k += 1
        q = eng.queue
        assert q.enqueued == q.finished + q.pending_count()
        assert idx.max_degree() <= idx.R
    assert all(op.done and not op.failed for op in eng.ops)
    assert no_tombstone_refs(idx)
    assert replay_commits(idx.vectors, before, eng.commits, idx.cfg.alpha_prune, idx.R) == idx.snapshot()


def test_concurrent_consumers(small_index, small_data):
    before = small_index.snapshot()
    eng = UpdateEngine(small_index)
    for v in small_data[:20]:
        eng.submit_insert(v + 0.2)
    eng.submit_delete(range(100, 120))

    def consumer(seed):
        clock = VirtualClock()
        rng = np.random.default_rng(seed)
        while eng.pending_count():
            eng.run_slice(float(rng.uniform(1, 20)), clock)

    threads = [threading.Thread(target=consumer, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert eng.queue.enqueued == eng.queue.finished
    assert no_tombstone_refs(small_index)
    assert small_index.max_degree() <= small_index.R
    assert replay_commits(small_index.vectors, before, eng.commits, 1.2, small_index.R) == small_index.snapshot()


def test_read_update_ops():
    text = io.StringIO("# header\nI 1 2 3\n\nD 4\nd 5  # trailing\n")
    ops = read_update_ops(text, dim=3)
    assert [k for k, _ in ops] == ["insert", "delete", "delete"]
    assert ops[0][1].tolist() == [1.0, 2.0, 3.0] and ops[2][1] == 5
    for bad in ["I 1 2", "D", "D -1", "D x", "X 1", "I a b c"]:
        with pytest.raises(MalformedOps):
            read_update_ops([bad], dim=3)


def test_submit_ops_groups_deletes(small_index):
    eng = UpdateEngine(small_index)
    ops = read_update_ops(["D 1", "D 2", "I " + " ".join(["0"] * 8), "D 3"])
    out = submit_ops(eng, ops)
    assert [o.kind for o in out] == ["delete", "insert", "delete"]
    assert out[0].ids == {1, 2}
