"""Reference implementations used only by the tests.

Each oracle is written from the problem statement, independent of the package
code it checks: plain Python loops, no shared helpers. ``scripts/freeze_oracles.py``
evaluates them on the fixed fixtures and writes ``tests/frozen/oracle_values.json``.
"""

from __future__ import annotations

import heapq
import math


def l2(a, b) -> float:
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


# -- budget solver -------------------------------------------------------------
def grid_budget(samples, theta: float, k_sparse: int = 1, step: float = 0.1) -> float:
    """Largest grid point b = m*step with mean scheduled overrun <= theta * mean(samples).

    Scheduled windows are 1-based positions K, 2K, ... in arrival order. The grid
    runs to max(max sample, upper bound of the linear regime) so it covers every
    feasible value.
    """
    allowed = theta * sum(samples)
    sched = [s for pos, s in enumerate(samples, 1) if pos % k_sparse == 0]
    if not sched:
        return max(max(samples), sum(samples) / len(samples) * (1 + theta))
    top = max(max(samples), sum(sched) / len(sched) + allowed / len(sched))
    best = 0.0
    m = 0
    while m * step <= top + step:
        b = m * step
        if sum(max(0.0, b - s) for s in sched) <= allowed + 1e-9:
            best = b
        m += 1
    return best


def grid_budget_dense(samples, theta: float, k_sparse: int = 1, step: float = 0.1) -> float:
    """Same grid search as ``grid_budget``, evaluated for all grid points at once."""
    import numpy as np

    x = np.asarray(samples, dtype=np.float64)
    allowed = theta * x.sum()
    sched = x[np.arange(1, len(x) + 1) % k_sparse == 0]
    if sched.size == 0:
        return max(x.max(), x.mean() * (1 + theta))
    top = max(x.max(), sched.mean() + allowed / sched.size)
    grid = np.arange(int(top / step) + 2) * step
    over = np.maximum(0.0, grid[:, None] - sched[None, :]).sum(axis=1)
    return float(grid[np.flatnonzero(over <= allowed + 1e-9).max()])


def constraint_holds(b: float, samples, theta: float, k_sparse: int = 1) -> bool:
    n = len(samples)
    over = sum(max(0.0, b - s) for pos, s in enumerate(samples, 1) if pos % k_sparse == 0) / n
    return over <= theta * sum(samples) / n + 1e-9


# -- SNG prune -------------------------------------------------------------------
def prune_oracle(target, cands, alpha: float, R: int) -> list:
    """``cands`` is a list of (id, vector). Straight transcription of the selection rule."""
    pool = sorted(cands, key=lambda c: (l2(target, c[1]), c[0]))
    alive = [True] * len(pool)
    out = []
    for i, (cid, cv) in enumerate(pool):
        if not alive[i]:
            continue
        out.append(cid)
        alive[i] = False
        if len(out) == R:
            break
        for j in range(i + 1, len(pool)):
            if alive[j] and alpha * l2(cv, pool[j][1]) <= l2(target, pool[j][1]):
                alive[j] = False
    return out


def sng_violations(target, cands, result, alpha: float, R: int) -> list[str]:
    """Checks the SNG postcondition on a finished result; returns problems found."""
    vec = dict(cands)
    d = {cid: l2(target, v) for cid, v in cands}
    problems = []
    chosen = list(result)
    order = sorted(vec, key=lambda c: (d[c], c))
    for pos, y in enumerate(chosen):
        for p in chosen[:pos]:
            if alpha * l2(vec[p], vec[y]) <= d[y]:
                problems.append(f"{y} selected although {p} covers it")
    full = len(chosen) >= R
    for x in order:
        if x in chosen:
            continue
        earlier = [p for p in chosen if (d[p], p) < (d[x], x)]
        covered = any(alpha * l2(vec[p], vec[x]) <= d[x] for p in earlier)
        if not covered and not full:
            problems.append(f"{x} dropped without cover")
    return problems


# -- simulated device -------------------------------------------------------------
def device_oracle(events, latency: float, penalty: float) -> list[tuple[int, float]]:
    """Event-queue model of a constant-latency device with a per-outstanding penalty.

    ``events`` is a time-ordered list of ("submit", t, [request ids]) and
    ("poll", t). Returns (request id, completion time) in the order a poller at
    each poll time would harvest them.
    """
    inflight: list[tuple[float, int]] = []
    harvested: list[tuple[int, float]] = []
    for ev in events:
        t = ev[1]
        if ev[0] == "submit":
            busy = sum(1 for due, _ in inflight if due > t)
            for rid in ev[2]:
                due = t + latency + penalty * busy
                heapq.heappush(inflight, (due, rid))
                busy += 1
        else:
            keep = []
            while inflight:
                due, rid = heapq.heappop(inflight)
                if due <= t:
                    harvested.append((rid, due))
                else:
                    keep.append((due, rid))
            for e in keep:
                heapq.heappush(inflight, e)
    return harvested


# -- statistics ------------------------------------------------------------------
def ci95_by_hand(xs) -> float:
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    return 1.96 * math.sqrt(var) / math.sqrt(n)


# -- brute-force neighbors ---------------------------------------------------------
def knn_scan(base, query, K: int, exclude=()) -> list[int]:
    """Quadratic scan; equal distances go to the lower id."""
    ex = set(exclude)
    scored = [(l2(query, v), i) for i, v in enumerate(base) if i not in ex]
    scored.sort()
    return [i for _, i in scored[:K]]


# -- tuner plant -----------------------------------------------------------------
def plant_ratio(alpha: float, noise: float) -> float:
    """Latency ratio of the synthetic plant: 10% slowdown at full utilization."""
    return 1.0 + 0.1 * alpha + noise
