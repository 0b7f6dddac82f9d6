"""Per-vector update tasks, the shared FIFO queue, and budgeted slice execution.

An insert becomes one ``insert_self`` task (find candidates, prune, write) that on
completion enqueues one ``insert_reverse_repair`` task carrying the new node's
neighbors as pending vectors. A delete tombstones its ids at once and enqueues a
``delete_scan`` task that walks the graph in budgeted chunks and emits one
``delete_repair`` task per affected node.

Candidate pools are frozen when a vector's repair starts, and each task holds a
claim on the vertex it is repairing from that point until its commit, so two
tasks never interleave writes to one neighbor list. Every pool freeze and commit
goes into a commit log; replaying the log with monolithic prunes reproduces the
graph (``replay_commits``).
"""

from __future__ import annotations

import enum
import itertools
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .costs import CostModel
from .graph_index import GraphIndex, GreedySearch, UnknownId
from .prune import Completed, PruneTaskState, prune_monolithic, prune_slice


class TaskKind(enum.Enum):
    INSERT_SELF = "insert_self"
    INSERT_REVERSE_REPAIR = "insert_reverse_repair"
    DELETE_SCAN = "delete_scan"
    DELETE_REPAIR = "delete_repair"


@dataclass
class UpdateOp:
    op_id: int
    kind: str  # "insert" | "delete"
    enqueued_at: float
    subject: int | None = None
    ids: frozenset[int] = frozenset()
    outstanding: int = 0
    completed_at: float | None = None
    error: str | None = None

    @property
    def done(self) -> bool:
        return self.completed_at is not None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class UpdateTask:
    kind: TaskKind
    subject: int
    op: UpdateOp
    task_id: int
    phase: str = "start"
    search: GreedySearch | None = None
    pool: list[int] | None = None
    prune_state: PruneTaskState | None = None
    result: list[int] | None = None
    pending_vectors: deque[int] = field(default_factory=deque)
    cursor: int = 0
    scan_end: int = 0
    claimed: int | None = None
    slices: int = 0
    yields: int = 0


@dataclass(frozen=True)
class Commit:
    """One log entry. ``set`` stores prune(pool); ``append`` adds ``value[0]`` to the
    members of ``pool``; ``freeze`` records a delete-repair pool as the scan saw it."""

    seq: int
    vid: int
    kind: str
    pool: tuple[int, ...]
    value: tuple[int, ...]


@dataclass(frozen=True)
class SliceResult:
    ran: bool
    completed: bool = False
    error: Exception | None = None


class TaskQueue:
    """Thread-safe FIFO. Popped tasks count as in flight until requeued or finished."""

    def __init__(self) -> None:
        self._q: deque[UpdateTask] = deque()
        self._lock = threading.Lock()
        self.in_flight = 0
        self.enqueued = 0
        self.finished = 0

    def push(self, task: UpdateTask) -> None:
        with self._lock:
            self._q.append(task)
            self.enqueued += 1

    def pop(self) -> UpdateTask | None:
        with self._lock:
            if not self._q:
                return None
            self.in_flight += 1
            return self._q.popleft()

    def requeue(self, task: UpdateTask) -> None:
        with self._lock:
            self._q.append(task)
            self.in_flight -= 1

    def finish(self) -> None:
        with self._lock:
            self.in_flight -= 1
            self.finished += 1

    def __len__(self) -> int:
        return len(self._q)

    def pending_count(self) -> int:
        with self._lock:
            return len(self._q) + self.in_flight


_YIELD, _NEXT, _DONE = "yield", "next", "done"


class UpdateEngine:
    """Owns the task queue for one index and runs slices of its tasks."""

    def __init__(self, index: GraphIndex, cost: CostModel | None = None, L_build: int | None = None) -> None:
        self.index = index
        self.cost = cost or CostModel()
        self.L_build = max(L_build or index.cfg.L_build, index.R)
        self.queue = TaskQueue()
        self.ops: list[UpdateOp] = []
        self.commits: list[Commit] = []
        self._ids = itertools.count()
        self._lock = threading.Lock()
        self._claims: dict[int, int] = {}
        self.slices = 0
        self.yields = 0
        self.failed_ops = 0

    # -- producers ---------------------------------------------------------
    def _new_op(self, kind: str, now: float, **kw) -> UpdateOp:
        with self._lock:
            op = UpdateOp(len(self.ops), kind, now, **kw)
            self.ops.append(op)
        return op

    def _spawn(self, kind: TaskKind, subject: int, op: UpdateOp, **kw) -> UpdateTask:
        with self._lock:
            op.outstanding += 1
        task = UpdateTask(kind, subject, op, next(self._ids), **kw)
        self.queue.push(task)
        return task

    def submit_insert(self, vector, now: float = 0.0) -> UpdateOp:
        """Allocate an id for ``vector`` and enqueue its insert_self task."""
        vid = self.index.allocate(vector)
        op = self._new_op("insert", now, subject=vid)
        self._spawn(TaskKind.INSERT_SELF, vid, op, phase="search")
        return op

    def submit_delete(self, ids: Iterable[int], now: float = 0.0) -> UpdateOp:
        """Tombstone ``ids`` now and enqueue the graph scan that finds affected nodes."""
        ids = frozenset(int(v) for v in ids)
        self.index.tombstone(ids)
        op = self._new_op("delete", now, ids=ids)
        self._spawn(TaskKind.DELETE_SCAN, -1, op, phase="scan", scan_end=self.index.count)
        return op

    # -- consumers ---------------------------------------------------------
    def pending_count(self) -> int:
        return self.queue.pending_count()

    def run_slice(self, budget: float, clock) -> SliceResult:
        """Dequeue one task and run it for at most ``budget`` microseconds.

        The first phase of a slice always runs, so a slice can overshoot by one
        lightweight phase or one prune iteration; later phases only start if
        their estimated cost fits in what is left.
        """
        if not budget > 0:
            return SliceResult(False)
        task = self.queue.pop()
        if task is None:
            return SliceResult(False)
        deadline = clock.now() + budget
        task.slices += 1
        self.slices += 1
        try:
            status = self._run(task, deadline, clock)
        except Exception as exc:  # surfaced to the caller and recorded on the op
            self._release(task)
            with self._lock:
                task.op.error = f"{type(exc).__name__}: {exc}"
                self.failed_ops += 1
            self._finish(task, clock.now())
            return SliceResult(True, False, exc)
        if status == _YIELD:
            task.yields += 1
            self.yields += 1
            self.queue.requeue(task)
            return SliceResult(True, False)
        if status == _NEXT:
            self.queue.requeue(task)
            return SliceResult(True, True)
        self._finish(task, clock.now())
        return SliceResult(True, True)

    def drain(self, clock, budget: float = math.inf, max_slices: int | None = None) -> int:
        """Run slices until nothing is pending. Returns the number of slices."""
        n = 0
        while self.pending_count():
            if max_slices is not None and n >= max_slices:
                break
            r = self.run_slice(budget, clock)
            if not r.ran:
                break
            n += 1
        return n

    def _finish(self, task: UpdateTask, now: float) -> None:
        op = task.op
        with self._lock:
            op.outstanding -= 1
            if op.outstanding == 0 and op.completed_at is None:
                op.completed_at = now
        self.queue.finish()

    # -- claims and log ----------------------------------------------------
    def _claim(self, task: UpdateTask, vid: int) -> bool:
        with self._lock:
            holder = self._claims.get(vid)
            if holder is not None and holder != task.task_id:
                return False
            self._claims[vid] = task.task_id
            task.claimed = vid
            return True

    def _release(self, task: UpdateTask) -> None:
        if task.claimed is None:
            return
        with self._lock:
            if self._claims.get(task.claimed) == task.task_id:
                del self._claims[task.claimed]
            task.claimed = None

    def _commit(self, vid: int, kind: str, pool, value) -> None:
        with self._lock:
            self.commits.append(Commit(len(self.commits), vid, kind, tuple(pool), tuple(value)))

    # -- execution ---------------------------------------------------------
    def _fits(self, first: bool, clock, deadline: float, est: float) -> bool:
        return first or clock.now() + est <= deadline

    def _run(self, task: UpdateTask, deadline: float, clock) -> str:
        if task.kind is TaskKind.INSERT_SELF:
            return self._run_insert_self(task, deadline, clock)
        if task.kind is TaskKind.INSERT_REVERSE_REPAIR:
            return self._run_reverse(task, deadline, clock)
        if task.kind is TaskKind.DELETE_SCAN:
            return self._run_scan(task, deadline, clock)
        return self._run_delete_repair(task, deadline, clock)

    def _prune_phase(self, task: UpdateTask, deadline: float, clock) -> bool:
        """Advance the task's prune. True once it has completed."""
        remaining = deadline - clock.now()
        if remaining <= 0:
            return False
        out = prune_slice(task.prune_state, remaining, clock, self.cost.prune_iteration_us)
        if isinstance(out, Completed):
            task.result = out.result
            task.prune_state = None
            return True
        return False

    def _freeze(self, task: UpdateTask, target: int, pool: list[int], clock) -> None:
        task.pool = pool
        task.prune_state = self.index.prune_state(target, pool)
        clock.charge(self.cost.update_distance_us * len(pool))

    def _refreeze_if_stale(self, task: UpdateTask, target: int, clock) -> bool:
        """Re-prune without ids tombstoned since the pool froze. True if it did.

        A delete scan that already passed ``target`` would never see such a
        reference, so it must not be written.
        """
        tomb = self.index.tombstones
        if tomb.isdisjoint(task.result):
            return False
        self._freeze(task, target, [u for u in task.pool if u not in tomb], clock)
        task.result = None
        task.phase = "prune"
        return True

    def _run_insert_self(self, task: UpdateTask, deadline: float, clock) -> str:
        idx, cost, p = self.index, self.cost, task.subject
        first = True
        if task.phase == "search":
            if task.search is None:
                task.search = GreedySearch(idx, idx.vectors[p], self.L_build, exclude=p)
            s = task.search
            while not s.done:
                clock.charge(cost.update_distance_us * s.step())
                if not s.done and clock.now() >= deadline:
                    return _YIELD
            first = False
            task.phase = "prep"
        if task.phase == "prep":
            cands = task.search.candidates()
            if not self._fits(first, clock, deadline, cost.update_distance_us * len(cands)):
                return _YIELD
            if not self._claim(task, p):
                return _YIELD
            task.search = None
            self._freeze(task, p, cands, clock)
            first = False
            task.phase = "prune"
        if task.phase == "prune":
            if not self._prune_phase(task, deadline, clock):
                return _YIELD
            first = False
            task.phase = "commit"
        if self._refreeze_if_stale(task, p, clock):
            return _YIELD
        if not self._fits(first, clock, deadline, cost.write_record_us):
            return _YIELD
        idx.set_neighbors(p, task.result)
        self._commit(p, "set", task.pool, task.result)
        if idx.live_count == 1:
            idx.entry_point = p
        clock.charge(cost.write_record_us)
        self._release(task)
        if task.result:
            self._spawn(
                TaskKind.INSERT_REVERSE_REPAIR, p, task.op,
                phase="prep", pending_vectors=deque(task.result),
            )
        return _DONE

    def _run_reverse(self, task: UpdateTask, deadline: float, clock) -> str:
        idx, cost, p = self.index, self.cost, task.subject
        u = task.pending_vectors[0]
        first = True
        if task.phase == "prep":
            if not self._claim(task, u):
                return _YIELD
            current = idx.adjacency[u]
            # a deleted p must not be linked back in; the scan may have passed u
            if u in idx.tombstones or p in idx.tombstones or p in current:
                return self._vector_done(task)
            pool = reverse_pool(current, p, idx.tombstones)
            if len(pool) <= idx.R:
                idx.set_neighbors(u, pool)
                self._commit(u, "append", pool[:-1], (p,))
                clock.charge(cost.write_record_us)
                return self._vector_done(task)
            self._freeze(task, u, pool, clock)
            first = False
            task.phase = "prune"
        if task.phase == "prune":
            if not self._prune_phase(task, deadline, clock):
                return _YIELD
            first = False
            task.phase = "commit"
        if self._refreeze_if_stale(task, u, clock):
            return _YIELD
        if not self._fits(first, clock, deadline, cost.write_record_us):
            return _YIELD
        idx.set_neighbors(u, task.result)
        self._commit(u, "set", task.pool, task.result)
        clock.charge(cost.write_record_us)
        return self._vector_done(task)

    def _vector_done(self, task: UpdateTask) -> str:
        self._release(task)
        task.pending_vectors.popleft()
        task.pool = task.result = None
        task.phase = "prep"
        return _NEXT if task.pending_vectors else _DONE

    def _run_scan(self, task: UpdateTask, deadline: float, clock) -> str:
        idx = self.index
        ids = task.op.ids
        step = self.cost.scan_record_us
        while task.cursor < task.scan_end:
            x = task.cursor
            task.cursor += 1
            clock.charge(step)
            adj = idx.adjacency[x]
            if x not in idx.tombstones and not ids.isdisjoint(adj):
                pool = delete_pool(idx, x)
                self._commit(x, "freeze", pool, ())
                self._spawn(TaskKind.DELETE_REPAIR, x, task.op, phase="prep", pool=pool)
            if task.cursor < task.scan_end and clock.now() >= deadline:
                return _YIELD
        return _DONE

    def _run_delete_repair(self, task: UpdateTask, deadline: float, clock) -> str:
        idx, cost, x = self.index, self.cost, task.subject
        first = True
        if task.phase == "prep":
            if not self._claim(task, x):
                return _YIELD
            if x in idx.tombstones:
                self._release(task)
                return _DONE
            self._freeze(task, x, task.pool, clock)
            first = False
            task.phase = "prune"
        if task.phase == "prune":
            if not self._prune_phase(task, deadline, clock):
                return _YIELD
            first = False
            task.phase = "commit"
        if self._refreeze_if_stale(task, x, clock):
            return _YIELD
        if not self._fits(first, clock, deadline, cost.write_record_us):
            return _YIELD
        idx.set_neighbors(x, task.result)
        self._commit(x, "set", task.pool, task.result)
        clock.charge(cost.write_record_us)
        self._release(task)
        return _DONE


def reverse_pool(current: list[int], p: int, tombstones) -> list[int]:
    """Neighbor list of u after adding the back-edge to p, before any prune."""
    return [w for w in current if w not in tombstones] + [p]


def delete_pool(index: GraphIndex, x: int) -> list[int]:
    """Live neighbors of x plus the live neighbors of its deleted neighbors.

    Every tombstoned neighbor is expanded, not only those of one delete op, so
    overlapping delete ops cannot leave a dangling reference behind.
    """
    tomb = index.tombstones
    adj = index.adjacency
    out: list[int] = []
    seen = {x}
    for u in adj[x]:
        if u not in tomb and u not in seen:
            seen.add(u)
            out.append(u)
    for d in adj[x]:
        if d in tomb:
            for w in adj[d]:
                if w not in tomb and w not in seen:
                    seen.add(w)
                    out.append(w)
    return out


class MalformedOps(ValueError):
    pass


def read_update_ops(lines: Iterable[str], dim: int | None = None) -> list[tuple[str, object]]:
    """Parse ``I <components...>`` / ``D <id>`` lines into ("insert", vector) / ("delete", id).

    Blank lines and ``#`` comments are skipped. Accepts an open file or any
    iterable of strings.
    """
    out: list[tuple[str, object]] = []
    for n, line in enumerate(lines, 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag, rest = parts[0].upper(), parts[1:]
        try:
            if tag == "I":
                v = np.array([float(x) for x in rest], dtype=np.float32)
                if v.size == 0 or (dim is not None and v.size != dim):
                    raise MalformedOps(f"line {n}: insert has {v.size} components, expected {dim}")
                out.append(("insert", v))
            elif tag == "D":
                if len(rest) != 1:
                    raise MalformedOps(f"line {n}: delete takes exactly one id")
                vid = int(rest[0])
                if vid < 0:
                    raise MalformedOps(f"line {n}: negative id")
                out.append(("delete", vid))
            else:
                raise MalformedOps(f"line {n}: unknown op {parts[0]!r}")
        except ValueError as exc:
            if isinstance(exc, MalformedOps):
                raise
            raise MalformedOps(f"line {n}: {exc}") from None
    return out


def submit_ops(engine: UpdateEngine, ops: Iterable[tuple[str, object]], now: float = 0.0) -> list[UpdateOp]:
    """Enqueue parsed ops in order; consecutive deletes share one op."""
    out: list[UpdateOp] = []
    batch: list[int] = []
    for kind, arg in ops:
        if kind == "delete":
            batch.append(int(arg))
            continue
        if batch:
            out.append(engine.submit_delete(batch, now))
            batch = []
        out.append(engine.submit_insert(arg, now))
    if batch:
        out.append(engine.submit_delete(batch, now))
    return out

# -- synchronous reference paths ----------------------------------------------
def apply_insert_sync(index: GraphIndex, vector, L_build: int | None = None) -> int:
    """Insert ``vector`` in one go: search, prune, write, then fix each back-edge."""
    L = max(L_build or index.cfg.L_build, index.R)
    p = index.allocate(vector)
    cands = GreedySearch(index, index.vectors[p], L, exclude=p).run().candidates()
    nbrs = index.prune(p, cands)
    index.set_neighbors(p, nbrs)
    if index.live_count == 1:
        index.entry_point = p
    for u in nbrs:
        current = index.adjacency[u]
        if u in index.tombstones or p in current:
            continue
        pool = reverse_pool(current, p, index.tombstones)
        index.set_neighbors(u, pool if len(pool) <= index.R else index.prune(u, pool))
    return p


def apply_delete_sync(index: GraphIndex, ids: Iterable[int]) -> None:
    """Tombstone ``ids`` and repair every live node that referenced one of them."""
    ids = frozenset(int(v) for v in ids)
    for v in ids:
        if not index.is_live(v):
            raise UnknownId(v)
    index.tombstone(ids)
    pools = {
        x: delete_pool(index, x)
        for x in range(index.count)
        if x not in index.tombstones and not ids.isdisjoint(index.adjacency[x])
    }
    for x, pool in pools.items():
        index.set_neighbors(x, index.prune(x, pool))


def replay_commits(
    vectors: np.ndarray,
    base: list[list[int]],
    commits: Iterable[Commit],
    alpha: float,
    R: int,
) -> list[list[int]]:
    """Rebuild neighbor lists from a commit log, recomputing every prune from its pool."""
    adj = [list(a) for a in base]
    for c in sorted(commits, key=lambda c: c.seq):
        while c.vid >= len(adj):
            adj.append([])
        if c.kind == "append":
            # ``pool`` is the tombstone-filtered list the engine appended to.
            keep = set(c.pool)
            adj[c.vid] = [w for w in adj[c.vid] if w in keep] + [c.value[0]]
        elif c.kind == "set":
            pool = [u for u in c.pool if u != c.vid]
            state = PruneTaskState.create(vectors[c.vid], pool, vectors[pool], alpha, R)
            adj[c.vid] = prune_monolithic(state)
    return adj
