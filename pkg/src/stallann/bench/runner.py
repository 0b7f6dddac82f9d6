"""Workload execution: warm-up, delete and insert phases under saturated search.

Virtual-time mode runs every search thread, update thread and the phase
controller as processes of one discrete-event simulation over the simulated
device, so a run is a pure function of its ``WorkloadSpec``. Wall-time mode runs
real threads against a file-backed index and device.

A paired run executes the same spec twice, once with the utilization ratio forced
to 0 (no co-execution), and reports speedup and latency change against it.
"""

from __future__ import annotations

import math
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..budgeting import BudgetConfig, BudgetTable
from ..clock import VirtualClock, WallClock
from ..costs import CostModel
from ..graph_index import GraphIndex, IndexConfig
from ..io_layer import DeviceProfile, FileDevice, SimulatedDevice
from ..search import CoExecHook, QueryParams, beam_search, run_steps, search_steps
from ..sim import Simulation
from ..tuner import Tuner, TunerConfig
from ..update_engine import UpdateEngine
from .datasets import DatasetSpec, ground_truth, load_vectors, mixture_draws, recall_at_k

PHASE_ORDERS = {"delete-insert": ("delete", "insert"), "insert-delete": ("insert", "delete")}


@dataclass
class WorkloadSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    R: int = 16
    L_build: int = 32
    alpha_prune: float = 1.2
    K: int = 10
    L: int = 100
    W: int = 4
    search_threads: int = 8
    update_threads: int = 1
    delete_fraction: float = 0.05
    insert_fraction: float = 0.05
    theta: float = 0.05
    device: DeviceProfile = field(default_factory=DeviceProfile)
    budget_mode: str = "per_batch"
    k_sparse: int = 8
    epoch_length: int = 100
    statistics: tuple[str, ...] = ("mean",)
    cost: CostModel = field(default_factory=CostModel)
    seed: int = 0
    num_queries: int = 100
    # None: long enough for the tuner to finish recording and bisection
    warmup_queries: int | None = None
    search_queries: int = 1000
    phase_order: str = "delete-insert"
    fixed_alpha: float | None = None
    paired: bool = True
    baseline_only: bool = False
    virtual_time: bool = True
    max_slices_per_hop: int = 1
    update_poll_us: float = 50.0

    def __post_init__(self) -> None:
        for name in ("delete_fraction", "insert_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.search_threads < 1:
            raise ValueError("search_threads must be >= 1")
        if self.update_threads < 0:
            raise ValueError("update_threads must be >= 0")
        if self.phase_order not in PHASE_ORDERS:
            raise ValueError(f"phase_order must be one of {sorted(PHASE_ORDERS)}")
        if self.fixed_alpha is not None and not 0 <= self.fixed_alpha <= 1:
            raise ValueError("fixed_alpha must be in [0, 1]")
        QueryParams(self.K, self.L, self.W)

    @property
    def updates(self) -> bool:
        return self.update_threads > 0 and (self.delete_fraction > 0 or self.insert_fraction > 0)

    def tuner_config(self) -> TunerConfig:
        return TunerConfig(
            theta=self.theta,
            epoch_length=self.epoch_length,
            min_epoch_samples=min(20, self.epoch_length),
            statistics=tuple(self.statistics),
        )

    def budget_config(self) -> BudgetConfig:
        return BudgetConfig(theta=self.theta, mode=self.budget_mode, k_sparse=self.k_sparse)

    def warmup(self) -> int:
        if self.warmup_queries is not None:
            return self.warmup_queries
        tc = self.tuner_config()
        bisect_epochs = math.ceil(math.log2(1 / tc.alpha_resolution))
        return (tc.recording_epochs + bisect_epochs + 1) * tc.epoch_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["statistics"] = list(self.statistics)
        d["device"]["samples"] = list(self.device.samples)
        return d


@dataclass
class Prepared:
    """Built index plus the vectors a run needs. Runs clone ``index``."""

    index: GraphIndex
    base: np.ndarray
    inserts: np.ndarray
    deletes: np.ndarray
    queries: np.ndarray


def prepare(spec: WorkloadSpec, index: GraphIndex | None = None) -> Prepared:
    ds = spec.dataset
    data = load_vectors(ds)
    n_ins = int(round(spec.insert_fraction * len(data))) if spec.updates else 0
    if ds.path is None:
        base = data
        inserts = mixture_draws(ds, n_ins, stream=1)
        queries = mixture_draws(ds, spec.num_queries, stream=2)
    else:
        # File data: hold out the tail as inserts, queries drawn from the base.
        base, inserts = data[: len(data) - n_ins], data[len(data) - n_ins :]
        rng = np.random.default_rng([spec.seed, 2])
        pick = rng.choice(len(base), min(spec.num_queries, len(base)), replace=False)
        queries = base[pick] + rng.normal(scale=1e-3, size=(len(pick), base.shape[1])).astype(np.float32)
    if index is None:
        cfg = IndexConfig(dim=base.shape[1], R=spec.R, L_build=spec.L_build, alpha_prune=spec.alpha_prune)
        index = GraphIndex.build(base, cfg, seed=spec.seed)
    n_del = int(round(spec.delete_fraction * len(base))) if spec.updates else 0
    rng = np.random.default_rng([spec.seed, 3])
    deletes = np.sort(rng.choice(len(base), n_del, replace=False))
    return Prepared(index, base, inserts, deletes, queries)


@dataclass
class PhaseWindow:
    name: str
    start: float
    end: float
    vectors: int


@dataclass
class RunResult:
    """Raw outcome of one run; ``metrics.summarize`` turns it into report fields."""

    forced_alpha: float | None
    virtual_time: bool
    phases: list[PhaseWindow]
    # per query: thread, query idx, start, end, latency, hops, ios, stall sum, idle sum, slices
    queries: np.ndarray
    query_phase: list[str]
    # per hop: query row, idle duration, batch size, stall
    hops: np.ndarray
    tuner: Tuner
    engine: UpdateEngine
    index: GraphIndex
    recall: float | None = None
    errors: list[str] = field(default_factory=list)
    wall_seconds: float | None = None


class _State:
    def __init__(self) -> None:
        self.phase = "warmup"
        self.stop = False
        self.queries_done = 0
        self.rows: list[tuple] = []
        self.labels: list[str] = []
        self.hops: list[tuple] = []
        self.windows: list[PhaseWindow] = []
        self.errors: list[str] = []
        self.lock = threading.Lock()

    def record(self, k: int, qi: int, label: str, t0: float, t1: float, stats) -> None:
        with self.lock:
            row = len(self.rows)
            self.rows.append(
                (k, qi, t0, t1, stats.latency, stats.hops, stats.io_count,
                 sum(stats.hop_stalls), stats.idle_time, stats.slices)
            )
            self.labels.append(label)
            for s, st in zip(stats.idle_samples, stats.hop_stalls):
                self.hops.append((row, s.duration, s.batch_size, st))
            self.queries_done += 1


def _finish_phase(st: _State, engine: UpdateEngine, name: str, start: float, ops, vectors: int, now: float) -> None:
    end = max((op.completed_at for op in ops if op.completed_at is not None), default=now)
    st.windows.append(PhaseWindow(name, start, max(end, start), vectors))


def run_once(spec: WorkloadSpec, prep: Prepared, forced_alpha: float | None = None) -> RunResult:
    if spec.virtual_time:
        return _run_virtual(spec, prep, forced_alpha)
    return _run_wall(spec, prep, forced_alpha)


def _components(spec: WorkloadSpec, index: GraphIndex, forced_alpha: float | None):
    engine = UpdateEngine(index, spec.cost, spec.L_build)
    budgets = BudgetTable(spec.budget_config())
    fixed = forced_alpha if forced_alpha is not None else spec.fixed_alpha
    tuner = Tuner(spec.tuner_config(), fixed_alpha=fixed, seed=spec.seed)
    return engine, budgets, tuner


def _run_virtual(spec: WorkloadSpec, prep: Prepared, forced_alpha: float | None) -> RunResult:
    index = prep.index.clone()
    device = SimulatedDevice(index.store, spec.device)
    index.write_listeners.append(device.invalidate)
    engine, budgets, tuner = _components(spec, index, forced_alpha)
    params = QueryParams(spec.K, spec.L, spec.W)
    st = _State()
    sim = Simulation()
    warmup = spec.warmup()

    def searcher(k: int, clock: VirtualClock):
        channel = device.channel(clock)
        hook = CoExecHook(engine, budgets, tuner=tuner, max_slices=spec.max_slices_per_hop)
        order = np.random.default_rng([spec.seed, 1000 + k])
        while True:
            for qi in order.permutation(len(prep.queries)).tolist():
                if st.stop:
                    return
                t0, label = clock.now(), st.phase
                try:
                    res = yield from search_steps(
                        index, prep.queries[qi], params, device, clock, channel, hook, spec.cost
                    )
                except Exception as exc:  # a failed query forces a rebaseline
                    st.errors.append(f"search: {type(exc).__name__}: {exc}")
                    tuner.search_failure()
                    yield clock.now() + spec.update_poll_us
                    continue
                st.record(k, qi, label, t0, clock.now(), res.stats)
                if tuner.observe_query(res.stats.latency):
                    tuner.end_epoch(clock.now())
                yield clock.now()

    def updater(clock: VirtualClock):
        while not st.stop:
            if engine.pending_count():
                r = engine.run_slice(math.inf, clock)
                if r.error is not None:
                    st.errors.append(f"update: {r.error}")
                yield clock.now() if r.ran else clock.now() + spec.update_poll_us
            else:
                yield clock.now() + spec.update_poll_us

    def controller(clock: VirtualClock):
        while st.queries_done < warmup:
            yield clock.now() + 1000.0
        if not spec.updates:
            st.phase = "search"
            start, target = clock.now(), st.queries_done + spec.search_queries
            while st.queries_done < target:
                yield clock.now() + 1000.0
            st.windows.append(PhaseWindow("search", start, clock.now(), 0))
            st.stop = True
            return
        for name in PHASE_ORDERS[spec.phase_order]:
            st.phase = name
            start = clock.now()
            ops = _submit_phase(engine, prep, name, start)
            while engine.pending_count():
                yield clock.now() + spec.update_poll_us
            _finish_phase(st, engine, name, start, ops, _phase_vectors(prep, name), clock.now())
        st.phase = "done"
        st.stop = True

    for k in range(spec.search_threads):
        c = VirtualClock()
        sim.spawn(f"search-{k}", searcher(k, c), c)
    if spec.updates:
        for m in range(spec.update_threads):
            c = VirtualClock()
            sim.spawn(f"update-{m}", updater(c), c)
    c = VirtualClock()
    sim.spawn("controller", controller(c), c)
    sim.run()
    return _result(spec, st, tuner, engine, index, prep, forced_alpha, None)


def _phase_vectors(prep: Prepared, name: str) -> int:
    return len(prep.deletes) if name == "delete" else len(prep.inserts)


def _submit_phase(engine: UpdateEngine, prep: Prepared, name: str, now: float) -> list:
    if name == "delete":
        return [engine.submit_delete(prep.deletes.tolist(), now)] if len(prep.deletes) else []
    return [engine.submit_insert(v, now) for v in prep.inserts]


def _run_wall(spec: WorkloadSpec, prep: Prepared, forced_alpha: float | None) -> RunResult:
    tmp = tempfile.mkdtemp(prefix="stallann-")
    path = os.path.join(tmp, "index.bin")
    prep.index.save(path)
    index = GraphIndex.open(path, in_memory=False, alpha_prune=spec.alpha_prune, L_build=spec.L_build)
    device = FileDevice(path, queue_depth=spec.device.queue_depth)
    engine, budgets, tuner = _components(spec, index, forced_alpha)
    params = QueryParams(spec.K, spec.L, spec.W)
    st = _State()
    warmup = spec.warmup()
    clock = WallClock()
    t_begin = time.perf_counter()

    def searcher(k: int) -> None:
        channel = device.channel(clock)
        hook = CoExecHook(engine, budgets, tuner=tuner, max_slices=spec.max_slices_per_hop)
        order = np.random.default_rng([spec.seed, 1000 + k])
        while not st.stop:
            for qi in order.permutation(len(prep.queries)).tolist():
                if st.stop:
                    return
                t0, label = clock.now(), st.phase
                try:
                    gen = search_steps(index, prep.queries[qi], params, device, clock, channel, hook, spec.cost)
                    res = run_steps(gen, clock)
                except Exception as exc:
                    st.errors.append(f"search: {type(exc).__name__}: {exc}")
                    tuner.search_failure()
                    continue
                st.record(k, qi, label, t0, clock.now(), res.stats)
                if tuner.observe_query(res.stats.latency):
                    tuner.end_epoch(clock.now())

    def updater() -> None:
        while not st.stop:
            r = engine.run_slice(math.inf, clock)
            if r.error is not None:
                st.errors.append(f"update: {r.error}")
            if not r.ran:
                time.sleep(spec.update_poll_us / 1e6)

    threads = [threading.Thread(target=searcher, args=(k,), daemon=True) for k in range(spec.search_threads)]
    if spec.updates:
        threads += [threading.Thread(target=updater, daemon=True) for _ in range(spec.update_threads)]
    for t in threads:
        t.start()
    try:
        while st.queries_done < warmup:
            time.sleep(0.005)
        if not spec.updates:
            st.phase = "search"
            start, target = clock.now(), st.queries_done + spec.search_queries
            while st.queries_done < target:
                time.sleep(0.005)
            st.windows.append(PhaseWindow("search", start, clock.now(), 0))
        else:
            for name in PHASE_ORDERS[spec.phase_order]:
                st.phase = name
                start = clock.now()
                ops = _submit_phase(engine, prep, name, start)
                while engine.pending_count():
                    time.sleep(0.001)
                _finish_phase(st, engine, name, start, ops, _phase_vectors(prep, name), clock.now())
        st.phase = "done"
    finally:
        st.stop = True
        for t in threads:
            t.join()
        device.close()
    res = _result(spec, st, tuner, engine, index, prep, forced_alpha, time.perf_counter() - t_begin)
    index.close()
    return res


def _result(spec, st: _State, tuner, engine, index, prep, forced_alpha, wall) -> RunResult:
    qdt = [
        ("thread", "i4"), ("query", "i4"), ("start", "f8"), ("end", "f8"), ("latency", "f8"),
        ("hops", "i4"), ("ios", "i4"), ("stall", "f8"), ("idle", "f8"), ("slices", "i4"),
    ]
    hdt = [("row", "i8"), ("idle", "f8"), ("batch", "i4"), ("stall", "f8")]
    res = RunResult(
        forced_alpha=forced_alpha,
        virtual_time=spec.virtual_time,
        phases=st.windows,
        queries=np.array(st.rows, dtype=qdt),
        query_phase=st.labels,
        hops=np.array(st.hops, dtype=hdt),
        tuner=tuner,
        engine=engine,
        index=index,
        errors=st.errors,
        wall_seconds=wall,
    )
    res.recall = evaluate_recall(index, prep.queries, QueryParams(spec.K, spec.L, spec.W))
    return res


def evaluate_recall(index: GraphIndex, queries: np.ndarray, params: QueryParams) -> float:
    """Recall@K of beam search against brute force over the live vectors."""
    found = [beam_search(index, q, params).ids for q in queries]
    truth = ground_truth(index.vectors[: index.count], queries, params.K, exclude=index.tombstones)
    return recall_at_k(found, truth, params.K)


def run_workload(spec: WorkloadSpec, prep: Prepared | None = None):
    """Run the workload (paired with a no-co-execution baseline when asked) and summarize."""
    from .report import build_report

    prep = prep or prepare(spec)
    baseline = coexec = None
    try:
        if spec.baseline_only:
            baseline = run_once(spec, prep, forced_alpha=0.0)
        else:
            if spec.paired and spec.updates:
                baseline = run_once(spec, prep, forced_alpha=0.0)
            coexec = run_once(spec, prep)
    except Exception as exc:
        return build_report(spec, coexec, baseline, error=f"{type(exc).__name__}: {exc}")
    return build_report(spec, coexec, baseline)
