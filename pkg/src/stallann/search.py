"""Beam search over on-device node records with stall-time co-execution.

Each hop follows submit, execute, poll:

1. submit reads for the W closest unvisited pool entries,
2. while they are in flight, hand the stall to an optional hook that may run one
   time-budgeted update slice,
3. harvest the completions, blocking if some are still outstanding.

``search_steps`` is a generator so a discrete-event driver can interleave many
virtual search threads. It yields the virtual time at which it wants to resume:
once before every submit (so submits across threads happen in time order) and
once for the wait on outstanding reads. ``beam_search`` drives it alone.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .budgeting import BudgetTable, IdleSample
from .clock import VirtualClock
from .costs import CostModel
from .graph_index import GraphIndex, decode_record
from .io_layer import DeviceProfile, ReadRequest, SimulatedDevice


class EmptyIndex(ValueError):
    pass


@dataclass(frozen=True)
class QueryParams:
    K: int = 10
    L: int = 100
    W: int = 4

    def __post_init__(self) -> None:
        if not 1 <= self.K <= self.L:
            raise ValueError("need 1 <= K <= L")
        if self.W < 1:
            raise ValueError("W must be >= 1")


class CandidatePool:
    """Best-so-far candidates ``(approx distance, id)`` capped at L, ascending.

    Equal distances order by id. Visited flags live in a flat byte array indexed
    by id that grows if the index does.
    """

    def __init__(self, L: int, capacity: int) -> None:
        self.L = L
        self.entries: list[tuple[float, int]] = []
        self.visited = bytearray(capacity)
        self.seen = bytearray(capacity)

    def _fit(self, vid: int) -> None:
        if vid >= len(self.seen):
            grow = vid + 1 - len(self.seen) + len(self.seen) // 2
            self.seen.extend(bytes(grow))
            self.visited.extend(bytes(grow))

    def is_new(self, vid: int) -> bool:
        return vid >= len(self.seen) or not self.seen[vid]

    def insert(self, dist: float, vid: int) -> None:
        self._fit(vid)
        self.seen[vid] = 1
        e = (dist, vid)
        if len(self.entries) >= self.L and e >= self.entries[-1]:
            return
        bisect.insort(self.entries, e)
        if len(self.entries) > self.L:
            self.entries.pop()

    def next_unvisited(self, W: int) -> list[int]:
        out = []
        for _, vid in self.entries:
            if not self.visited[vid]:
                out.append(vid)
                if len(out) == W:
                    break
        return out

    def mark_visited(self, ids) -> None:
        for v in ids:
            self.visited[v] = 1

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SearchStats:
    hops: int = 0
    io_count: int = 0
    cache_hits: int = 0
    idle_samples: list[IdleSample] = field(default_factory=list)
    # submit-to-harvest time of each hop; equals the idle window when nothing ran
    hop_stalls: list[float] = field(default_factory=list)
    latency: float = 0.0
    slices: int = 0
    start: float = 0.0

    @property
    def idle_time(self) -> float:
        return sum(s.duration for s in self.idle_samples)


def idle_ratio(stats: SearchStats) -> float:
    if stats.latency <= 0:
        return 0.0
    return min(1.0, stats.idle_time / stats.latency)


class StallHook(Protocol):
    def on_stall(self, batch_size: int, clock) -> int:
        """Run bounded work while reads are in flight; return slices run."""

    def record_idle(self, sample: IdleSample) -> None:
        ...


@dataclass(frozen=True)
class SearchResult:
    ids: list[int]
    distances: list[float]
    stats: SearchStats


def search_steps(
    index: GraphIndex,
    query,
    params: QueryParams,
    device,
    clock,
    channel=None,
    hook: StallHook | None = None,
    cost: CostModel | None = None,
):
    """Generator form of beam search; returns a ``SearchResult``."""
    if index.count == 0:
        raise EmptyIndex("index has no nodes")
    cost = cost or CostModel()
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query has shape {q.shape}, index dim is {index.dim}")
    channel = channel if channel is not None else device.default_channel
    cfg = index.cfg
    size = cfg.padded_record_size
    stats = SearchStats(start=clock.now())

    pool = CandidatePool(params.L, index.count)
    ep = index.entry_point
    pool.insert(float(index.approx_distances(q, [ep])[0]), ep)
    fetched: list[tuple[float, int]] = []
    tombs = index.tombstones

    while True:
        frontier = pool.next_unvisited(params.W)
        if not frontier:
            break
        pool.mark_visited(frontier)
        yield clock.now()
        reqs = [ReadRequest(k, index.offset(v), size) for k, v in enumerate(frontier)]
        handle = device.submit(reqs, channel)
        submitted = handle.submitted_at
        misses = len(frontier) - handle.hits
        if misses and hook is not None:
            stats.slices += hook.on_stall(len(frontier), clock)
        comps = device.poll_nonblocking(handle)
        if not handle.closed:
            if device.virtual:
                yield handle.last_due
                comps += device.poll_nonblocking(handle)
            else:
                while not handle.closed:
                    comps += device.wait_blocking(handle)
        done_at = max(c.done_at for c in comps)
        idle = max(0.0, done_at - submitted) if misses else 0.0
        sample = IdleSample(idle, len(frontier))
        stats.idle_samples.append(sample)
        stats.hop_stalls.append(clock.now() - submitted)
        stats.hops += 1
        stats.io_count += len(frontier)
        stats.cache_hits += handle.hits
        if misses and hook is not None:
            hook.record_idle(sample)

        fresh: list[int] = []
        for c in sorted(comps, key=lambda c: c.request_id):
            vid = frontier[c.request_id]
            rec = decode_record(c.payload, cfg)
            if vid not in tombs:
                d = rec.vector.astype(np.float64) - q
                fetched.append((float(np.sqrt(d @ d)), vid))
            for u in rec.neighbors:
                if pool.is_new(u):
                    pool._fit(u)
                    pool.seen[u] = 1
                    fresh.append(u)
        if fresh:
            for d, u in zip(index.approx_distances(q, fresh).tolist(), fresh):
                pool.insert(d, u)
        clock.charge(
            cost.hop_overhead_us
            + cost.record_decode_us * len(comps)
            + cost.exact_distance_us * len(comps)
            + cost.approx_distance_us * len(fresh)
        )

    fetched.sort()
    top = fetched[: params.K]
    stats.latency = clock.now() - stats.start
    return SearchResult([v for _, v in top], [d for d, _ in top], stats)


def run_steps(gen, clock):
    """Drive a step generator alone: jump a virtual clock to each requested time."""
    try:
        while True:
            t = next(gen)
            if clock.virtual:
                clock.advance_to(t)
    except StopIteration as stop:
        return stop.value


def beam_search(
    index: GraphIndex,
    query,
    params: QueryParams | None = None,
    device=None,
    hook: StallHook | None = None,
    channel=None,
    cost: CostModel | None = None,
) -> SearchResult:
    """Single-query beam search. Without a device, reads go through a zero-latency simulator."""
    params = params or QueryParams()
    if device is None:
        device = SimulatedDevice(index.store, DeviceProfile.constant(0.0), VirtualClock())
    channel = channel if channel is not None else device.default_channel
    gen = search_steps(index, query, params, device, channel.clock, channel, hook, cost)
    return run_steps(gen, channel.clock)


class CoExecHook:
    """Stall hook that spends ``alpha * tau_est`` of each stall on update slices.

    One hook per search thread (the k-sparse hop counter is per thread); the budget
    table, engine and tuner are shared.
    """

    def __init__(
        self,
        engine,
        budgets: BudgetTable,
        tuner=None,
        alpha: float | None = None,
        max_slices: int = 1,
        post_slice: Callable[[], None] | None = None,
    ) -> None:
        if tuner is None and alpha is None:
            raise ValueError("need a tuner or a fixed alpha")
        self.engine = engine
        self.budgets = budgets
        self.tuner = tuner
        self.alpha = alpha
        self.max_slices = max_slices
        # Stand-in for cache prefetching after a slice; nothing to prefetch here.
        self.post_slice = post_slice
        self.stall_hops = 0
        self.granted: list[float] = []

    def current_alpha(self) -> float:
        return self.alpha if self.alpha is not None else self.tuner.alpha

    def on_stall(self, batch_size: int, clock) -> int:
        hop = self.stall_hops
        self.stall_hops += 1
        if not self.budgets.schedules(hop):
            return 0
        tau = self.budgets.get_budget(batch_size)
        if tau is None:
            return 0
        budget = self.current_alpha() * tau
        if budget <= 0:
            return 0
        deadline = clock.now() + budget
        ran = 0
        while ran < self.max_slices:
            remaining = deadline - clock.now()
            if remaining <= 0:
                break
            r = self.engine.run_slice(remaining, clock)
            if not r.ran:
                break
            ran += 1
            if self.post_slice is not None:
                self.post_slice()
        if ran:
            self.granted.append(budget)
        return ran

    def record_idle(self, sample: IdleSample) -> None:
        self.budgets.record_sample(sample)
