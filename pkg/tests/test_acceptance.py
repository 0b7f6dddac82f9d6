"""Acceptance criteria, one test each; the terminal summary prints a pass/fail line per criterion.

Criteria 7, 8 and 9 share one 10K-vector paired run (session fixture).
"""

import math
import time

import numpy as np
import pytest

from oracles import constraint_holds, grid_budget_dense, plant_ratio
from stallann.bench.datasets import DatasetSpec, mixture_draws
from stallann.bench.runner import WorkloadSpec, evaluate_recall, prepare, run_workload
from stallann.budgeting import BudgetConfig, BudgetTable, is_feasible, solve_budget, solve_budget_ksparse
from stallann.clock import VirtualClock
from stallann.io_layer import DeviceProfile, SimulatedDevice
from stallann.prune import Completed, PruneTaskState, Yielded, prune_monolithic, prune_slice
from stallann.search import CoExecHook, QueryParams, beam_search
from stallann.tuner import LatencyObservation, TunerConfig, TunerPhase, TunerState, step
from stallann.update_engine import UpdateEngine, replay_commits

THETA = 0.05
EPS = 0.5

TEN_K = WorkloadSpec(
    dataset=DatasetSpec(n=10_000, dim=16, clusters=64, seed=0),
    R=16,
    L_build=32,
    K=10,
    L=100,
    W=4,
    search_threads=8,
    theta=THETA,
    device=DeviceProfile.lognormal(seed=0),
    num_queries=100,
)


@pytest.fixture(scope="session")
def ten_k():
    prep = prepare(TEN_K)
    before = prep.index.snapshot()
    report = run_workload(TEN_K, prep)
    return prep, before, report


@pytest.mark.criterion(1, "resumable prune equals monolithic prune on 10,000 random instances")
def test_c1_resumable_prune(request):
    t0 = time.perf_counter()
    mismatches = yields = 0
    for k in range(10_000):
        rng = np.random.default_rng([1, k])
        n, R = int(rng.integers(0, 65)), int(rng.integers(1, 17))
        alpha = float(rng.uniform(1.0, 1.6))
        vecs = rng.normal(size=(n, 8))
        ids = rng.permutation(10 * max(n, 1))[:n]
        target = rng.normal(size=8)
        expected = prune_monolithic(PruneTaskState.create(target, ids, vecs, alpha, R))
        state = PruneTaskState.create(target, ids, vecs, alpha, R)
        clock = VirtualClock()
        while True:
            out = prune_slice(state, float(rng.uniform(0.5, 20.0)), clock, 1.0)
            if isinstance(out, Completed):
                break
            yields += 1
        mismatches += out.result != expected
    elapsed = time.perf_counter() - t0
    request.node.measured = f"mismatches={mismatches} yields={yields} runtime={elapsed:.2f}s"
    assert mismatches == 0
    assert elapsed < 10.0


@pytest.mark.criterion(2, "worked prune example: first checkpoint and final result")
def test_c2_worked_example(request, frozen):
    inst = frozen["worked_prune"]["instance"]
    cands = np.array(inst["candidates"])
    state = PruneTaskState.create(np.array(inst["target"]), list(range(len(cands))), cands, inst["alpha"], inst["R"])
    clock = VirtualClock()
    out = prune_slice(state, 7, clock, 1.0)
    assert isinstance(out, Yielded)
    cp = out.checkpoint
    result = [int(state.pool_ids[k]) for k in cp.result]
    final = prune_slice(state, math.inf, clock, 1.0).result
    request.node.measured = f"result={result} done={cp.flags} i={cp.i} j={cp.j} final={final}"
    assert result == [0, 2]
    assert cp.flags == [True, True, True, True, False, False]
    assert (cp.i, cp.j) == (2, 5)
    assert final == [0, 2, 4]


@pytest.mark.criterion(3, "budget solver feasible and maximal within 0.5us against a grid oracle")
def test_c3_budget_solver(request, frozen):
    rng = np.random.default_rng(3)
    windows = []
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        kind = rng.integers(3)
        if kind == 0:
            w = rng.lognormal(np.log(100.0), 0.5, n)
        elif kind == 1:
            w = rng.uniform(0, 400, n)
        else:
            w = rng.choice([10.0, 50.0, 100.0, 300.0], n)
        windows.append((w.tolist(), float(rng.uniform(0, 0.3)), int(rng.integers(1, 9))))
    t0 = time.perf_counter()
    got = [solve_budget_ksparse(w, th, k, EPS) for w, th, k in windows]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for b, (w, th, k) in zip(got, windows):
        assert is_feasible(b, w, th, k) and constraint_holds(b, w, th, k)
        worst = max(worst, abs(b - grid_budget_dense(w, th, k)))
    b = frozen["budget"]
    pair = solve_budget([100, 300], 0.1)
    sparse = solve_budget_ksparse([10, 10, 10, 100], 0.1, 4)
    request.node.measured = f"max|solver-grid|={worst:.3f}us pair={pair:.2f} ksparse={sparse:.2f} runtime={elapsed:.2f}s"
    assert worst <= EPS
    assert abs(pair - b["pair_theta_0.1"]) <= EPS and abs(sparse - b["ksparse_4_theta_0.1"]) <= EPS
    assert elapsed < 5.0


@pytest.mark.criterion(4, "per-hop stall inflation <= theta + 0.02 with 28 simulated search threads")
def test_c4_overrun_bound(request):
    spec = WorkloadSpec(
        dataset=DatasetSpec(n=3000, dim=16, clusters=32, seed=4),
        L=50,
        search_threads=28,
        theta=THETA,
        device=DeviceProfile.lognormal(seed=1),
        delete_fraction=0.2,
        insert_fraction=0.1,
        # full utilization of every granted budget: the bound must hold without tuner back-off
        fixed_alpha=1.0,
        num_queries=200,
    )
    t0 = time.perf_counter()
    report = run_workload(spec)
    elapsed = time.perf_counter() - t0
    infl = report.stall_inflation
    request.node.measured = (
        f"inflation delete={infl['delete']:.4f} insert={infl['insert']:.4f} "
        f"slices={report.coexec.slices} runtime={elapsed:.1f}s"
    )
    assert report.complete
    assert report.coexec.slices > 0
    assert max(infl["delete"], infl["insert"]) <= THETA + 0.02
    assert elapsed < 120.0


@pytest.mark.criterion(5, "tuner reaches Steady within 40 epochs; trailing-100 ratio in [1, 1+theta+0.01]")
def test_c5_tuner_closed_loop(request):
    cfg = TunerConfig(theta=THETA)
    worst_steady, means = 0, []
    for seed in range(10):
        rng = np.random.default_rng([5, seed])
        state, alpha = TunerState(), 0.0
        ratios, steady_at = [], None
        for epoch in range(1, 501):
            r = plant_ratio(alpha, float(rng.normal(0.0, 0.02)))
            ratios.append(r)
            state, alpha = step(state, LatencyObservation(mean=100.0 * r, count=cfg.epoch_length), cfg)
            if steady_at is None and state.phase is TunerPhase.STEADY:
                steady_at = epoch
        assert steady_at is not None
        worst_steady = max(worst_steady, steady_at)
        means.append(float(np.mean(ratios[-100:])))
    request.node.measured = f"steady by epoch {worst_steady}; trailing ratio {min(means):.4f}..{max(means):.4f}"
    assert worst_steady <= 40
    assert all(1.0 <= m <= 1.0 + THETA + 0.01 for m in means)


@pytest.mark.criterion(6, "empty-queue co-execution leaves results and I/O counts unchanged over 1,000 queries")
def test_c6_transparency(request, ten_k):
    prep, _, _ = ten_k
    index = prep.index
    queries = mixture_draws(TEN_K.dataset, 1000, stream=6)
    params = QueryParams(10, 100, 4)
    plain_dev = SimulatedDevice(index.store, DeviceProfile.lognormal(seed=6))
    co_dev = SimulatedDevice(index.store, DeviceProfile.lognormal(seed=6))
    hook = CoExecHook(UpdateEngine(index), BudgetTable(BudgetConfig(min_samples=1)), alpha=1.0)
    diffs = 0
    for q in queries:
        a = beam_search(index, q, params, plain_dev)
        b = beam_search(index, q, params, co_dev, hook=hook)
        diffs += (a.ids, a.distances, a.stats.io_count) != (b.ids, b.distances, b.stats.io_count)
    request.node.measured = f"differing queries={diffs}/1000"
    assert diffs == 0


@pytest.mark.criterion(7, "graph consistent after 5% delete + 5% insert under concurrent search")
def test_c7_graph_consistency(request, ten_k):
    prep, before, report = ten_k
    run = report.series["coexec"]
    idx, eng = run.index, run.engine
    dangling = sum(1 for v in idx.live_ids() if set(idx.adjacency[v]) & idx.tombstones)
    replayed = replay_commits(idx.vectors, before, eng.commits, idx.cfg.alpha_prune, idx.R)
    equal = replayed == idx.snapshot()
    request.node.measured = (
        f"dangling={dangling} max_degree={idx.max_degree()} replay_equal={equal} "
        f"deleted={len(idx.tombstones)} inserted={idx.count - len(before)}"
    )
    assert report.complete and eng.pending_count() == 0
    assert len(idx.tombstones) == 500 and idx.count - len(before) == 500
    assert dangling == 0
    assert idx.max_degree() <= idx.R
    assert equal


@pytest.mark.criterion(8, "update-phase speedup > 1 with mean latency degradation <= theta + 0.03")
def test_c8_end_to_end(request, ten_k):
    _, _, report = ten_k
    sp, dg = report.speedup, report.degradation
    request.node.measured = (
        f"speedup delete={sp['delete']:.2f} insert={sp['insert']:.2f} total={sp['total']:.2f}; "
        f"degradation delete={dg['delete']:+.4f} insert={dg['insert']:+.4f}"
    )
    assert sp["delete"] > 1.0 and sp["insert"] > 1.0
    assert max(dg["delete"], dg["insert"]) <= THETA + 0.03


@pytest.mark.criterion(9, "recall@10 >= 0.90 on 10K synthetic vectors, R=16, L=100")
def test_c9_recall(request, ten_k):
    prep, _, report = ten_k
    recall = evaluate_recall(prep.index, prep.queries, QueryParams(10, 100, 4))
    after = report.coexec.recall_at_k
    request.node.measured = f"recall@10={recall:.4f} after updates={after:.4f} queries={len(prep.queries)}"
    assert len(prep.queries) == 100
    assert recall >= 0.90
