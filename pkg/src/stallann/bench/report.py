"""Metrics summaries and the JSON + CSV report format.

Latency confidence intervals use the normal approximation: half-width
1.96 * s / sqrt(n) with s the sample standard deviation (ddof=1). Fields with no
data (a phase with no queries, a ratio without a baseline) are null, never 0.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

SCHEMA = "stallann.metrics/1"
Z95 = 1.96


def ci95(samples) -> float | None:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        return None
    return float(Z95 * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class LatencyStats:
    n: int
    mean: float | None
    p95: float | None
    p99: float | None
    ci95: float | None

    @classmethod
    def of(cls, samples) -> "LatencyStats":
        x = np.asarray(samples, dtype=np.float64)
        if x.size == 0:
            return cls(0, None, None, None, None)
        return cls(
            int(x.size),
            float(x.mean()),
            float(np.percentile(x, 95)),
            float(np.percentile(x, 99)),
            ci95(x),
        )


@dataclass
class PhaseMetrics:
    name: str
    duration_us: float
    queries: int
    latency: LatencyStats
    qps: float | None
    hop_stall_mean: float | None
    idle_ratio: float | None
    vectors: int
    update_throughput: float | None  # vectors per second


@dataclass
class RunMetrics:
    forced_alpha: float | None
    phases: dict[str, PhaseMetrics]
    recall_at_k: float | None
    idle_ratio: float | None
    queries: int
    slices: int
    yields: int
    failed_ops: int
    tuner_phase: str
    tuner_alpha: float
    tuner_epochs: int
    tuner_adjustments: int
    errors: list[str] = field(default_factory=list)
    wall_seconds: float | None = None


@dataclass
class MetricsReport:
    schema: str
    spec: dict
    virtual_time: bool
    complete: bool
    error: str | None
    coexec: RunMetrics | None
    baseline: RunMetrics | None
    speedup: dict[str, float | None] | None
    degradation: dict[str, float | None] | None
    stall_inflation: dict[str, float | None] | None
    # raw series for the companion CSVs; not part of the JSON document
    series: dict = field(default_factory=dict, repr=False)

    def to_json_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "series"}
        for run in ("coexec", "baseline"):
            if d[run] is not None:
                d[run] = asdict(d[run])
            if d[run] is not None and self.virtual_time:
                d[run].pop("wall_seconds", None)
        return d


def _ratio(a, b) -> float | None:
    if a is None or b is None or not b:
        return None
    return a / b


def _phase_metrics(run, window) -> PhaseMetrics:
    q = run.queries
    labels = np.asarray(run.query_phase)
    mask = labels == window.name if len(labels) else np.zeros(0, dtype=bool)
    lat = q["latency"][mask] if len(q) else np.zeros(0)
    dur = window.end - window.start
    hops = int(q["hops"][mask].sum()) if len(q) else 0
    total_lat = float(lat.sum())
    return PhaseMetrics(
        name=window.name,
        duration_us=dur,
        queries=int(lat.size),
        latency=LatencyStats.of(lat),
        qps=lat.size / (dur / 1e6) if dur > 0 and lat.size else None,
        hop_stall_mean=float(q["stall"][mask].sum()) / hops if hops else None,
        idle_ratio=float(q["idle"][mask].sum()) / total_lat if total_lat > 0 else None,
        vectors=window.vectors,
        update_throughput=window.vectors / (dur / 1e6) if dur > 0 and window.vectors else None,
    )


def summarize(run) -> RunMetrics:
    q = run.queries
    total = float(q["latency"].sum()) if len(q) else 0.0
    t = run.tuner
    return RunMetrics(
        forced_alpha=run.forced_alpha,
        phases={w.name: _phase_metrics(run, w) for w in run.phases},
        recall_at_k=run.recall,
        idle_ratio=float(q["idle"].sum()) / total if total > 0 else None,
        queries=int(len(q)),
        slices=int(q["slices"].sum()) if len(q) else 0,
        yields=run.engine.yields,
        failed_ops=run.engine.failed_ops,
        tuner_phase=t.state.phase.value if t.fixed_alpha is None else "Fixed",
        tuner_alpha=t.alpha,
        tuner_epochs=len(t.trace),
        tuner_adjustments=t.state.adjustments,
        errors=list(run.errors),
        wall_seconds=run.wall_seconds,
    )


def _compare(co: RunMetrics, base: RunMetrics):
    names = [n for n in co.phases if n in base.phases]
    speed = {n: _ratio(base.phases[n].duration_us, co.phases[n].duration_us) for n in names}
    tb = sum(base.phases[n].duration_us for n in names)
    tc = sum(co.phases[n].duration_us for n in names)
    speed["total"] = _ratio(tb, tc)

    def rel(a, b):
        r = _ratio(a, b)
        return None if r is None else r - 1.0

    deg = {n: rel(co.phases[n].latency.mean, base.phases[n].latency.mean) for n in names}
    infl = {n: rel(co.phases[n].hop_stall_mean, base.phases[n].hop_stall_mean) for n in names}
    return speed, deg, infl


def build_report(spec, coexec_run, baseline_run, error: str | None = None) -> MetricsReport:
    co = summarize(coexec_run) if coexec_run is not None else None
    base = summarize(baseline_run) if baseline_run is not None else None
    speed = deg = infl = None
    if co is not None and base is not None:
        speed, deg, infl = _compare(co, base)
    failed = any(r is not None and r.failed_ops for r in (co, base))
    report = MetricsReport(
        schema=SCHEMA,
        spec=spec.to_dict(),
        virtual_time=spec.virtual_time,
        complete=error is None and not failed,
        error=error,
        coexec=co,
        baseline=base,
        speedup=speed,
        degradation=deg,
        stall_inflation=infl,
    )
    for name, run in (("coexec", coexec_run), ("baseline", baseline_run)):
        if run is not None:
            report.series[name] = run
    return report


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: MetricsReport, path) -> dict[str, str]:
    """Write ``path`` (JSON) plus latency, tuner-trace, idle-sample and op CSVs beside it."""
    path = os.fspath(path)
    stem = path[:-5] if path.endswith(".json") else path
    files: dict[str, str] = {}
    for name, run in report.series.items():
        q = run.queries
        lat = f"{stem}.{name}.latency.csv"
        _write_csv(
            lat,
            ["thread", "query", "phase", "start_us", "end_us", "latency_us", "hops", "ios", "slices"],
            (
                (int(r["thread"]), int(r["query"]), ph, float(r["start"]), float(r["end"]),
                 float(r["latency"]), int(r["hops"]), int(r["ios"]), int(r["slices"]))
                for r, ph in zip(q, run.query_phase)
            ),
        )
        tr = f"{stem}.{name}.tuner.csv"
        _write_csv(tr, ["epoch", "time_us", "phase", "alpha", "ratio"],
                   ((r.epoch, r.time, r.phase, r.alpha, r.ratio) for r in run.tuner.trace))
        idle = f"{stem}.{name}.idle.csv"
        _write_csv(idle, ["query_row", "idle_us", "batch_size", "stall_us"],
                   ((int(h["row"]), float(h["idle"]), int(h["batch"]), float(h["stall"])) for h in run.hops))
        ops = f"{stem}.{name}.ops.csv"
        _write_csv(ops, ["op_id", "kind", "enqueue_us", "drain_us", "error"],
                   ((o.op_id, o.kind, o.enqueued_at, o.completed_at, o.error or "") for o in run.engine.ops))
        files.update({f"{name}_latency": lat, f"{name}_tuner": tr, f"{name}_idle": idle, f"{name}_ops": ops})
    doc = _clean(report.to_json_dict())
    doc["files"] = {k: os.path.basename(v) for k, v in files.items()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, allow_nan=False, default=_jsonable)
    return files


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def _clean(x):
    """NaN floats become null so the JSON stays strict."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    return x


def load_report(path) -> MetricsReport:
    with open(path) as f:
        d = json.load(f)
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unknown report schema {d.get('schema')!r}")

    def run(r):
        if r is None:
            return None
        phases = {
            k: PhaseMetrics(**{**p, "latency": LatencyStats(**p["latency"])}) for k, p in r["phases"].items()
        }
        return RunMetrics(**{**r, "phases": phases, "wall_seconds": r.get("wall_seconds")})

    return MetricsReport(
        schema=d["schema"],
        spec=d["spec"],
        virtual_time=d["virtual_time"],
        complete=d["complete"],
        error=d["error"],
        coexec=run(d["coexec"]),
        baseline=run(d["baseline"]),
        speedup=d["speedup"],
        degradation=d["degradation"],
        stall_inflation=d["stall_inflation"],
    )
