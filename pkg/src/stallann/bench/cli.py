"""Command-line front end: ``stallann build | search | bench``.

Exit status is 0 only when the command ran to completion; a run that finished
with failed update ops or search errors exits 1, bad arguments exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from ..graph_index import GraphIndex, IndexConfig
from ..io_layer import DeviceProfile, FileDevice, SimulatedDevice
from ..search import QueryParams, beam_search, idle_ratio
from .datasets import DatasetSpec, ground_truth, load_vectors, mixture_draws, recall_at_k
from .report import LatencyStats, emit_report
from .runner import PHASE_ORDERS, WorkloadSpec, prepare, run_workload


def _synthetic(text: str) -> tuple[int, int, int]:
    try:
        n, dim, clusters = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected n,dim,clusters") from None
    if min(n, dim, clusters) < 1:
        raise argparse.ArgumentTypeError("n, dim and clusters must be >= 1")
    return n, dim, clusters


def _dataset(args) -> DatasetSpec:
    if args.dataset and args.synthetic:
        raise SystemExit("error: --dataset and --synthetic are mutually exclusive")
    if args.dataset:
        return DatasetSpec(path=args.dataset, seed=args.seed, limit=args.limit)
    n, dim, clusters = args.synthetic or (10_000, 16, 64)
    return DatasetSpec(n=n, dim=dim, clusters=clusters, seed=args.seed)


def _profile(args) -> DeviceProfile:
    if args.device_profile:
        return DeviceProfile.load(args.device_profile)
    return DeviceProfile.lognormal(seed=args.seed)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help=".fvecs or .bvecs file")
    p.add_argument("--synthetic", type=_synthetic, metavar="N,DIM,CLUSTERS", help="Gaussian mixture (default 10000,16,64)")
    p.add_argument("--limit", type=int, help="read at most this many vectors from --dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--R", type=int, default=16, help="max out-degree")
    p.add_argument("--L-build", type=int, default=32)
    p.add_argument("--alpha-prune", type=float, default=1.2)


def _add_query_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--L", type=int, default=100)
    p.add_argument("--W", type=int, default=4)
    p.add_argument("--device", choices=("sim", "file"), default="sim")
    p.add_argument("--device-profile", metavar="PATH", help="JSON device profile for the simulator")


def cmd_build(args) -> int:
    data = load_vectors(_dataset(args))
    cfg = IndexConfig(dim=data.shape[1], R=args.R, L_build=args.L_build, alpha_prune=args.alpha_prune)
    t0 = time.perf_counter()
    index = GraphIndex.build(data, cfg, seed=args.seed)
    index.save(args.out)
    info = {
        "path": args.out,
        "count": index.count,
        "dim": index.dim,
        "R": index.R,
        "max_degree": index.max_degree(),
        "entry_point": index.entry_point,
        "reachable": len(index.reachable()),
        "build_seconds": round(time.perf_counter() - t0, 3),
    }
    print(json.dumps(info))
    return 0


def _queries(args, spec: DatasetSpec, base: np.ndarray) -> np.ndarray:
    if spec.path is None:
        return mixture_draws(spec, args.num_queries, stream=2)
    rng = np.random.default_rng([args.seed, 2])
    pick = rng.choice(len(base), min(args.num_queries, len(base)), replace=False)
    return base[pick] + rng.normal(scale=1e-3, size=(len(pick), base.shape[1])).astype(np.float32)


def cmd_search(args) -> int:
    spec = _dataset(args)
    if args.index:
        index = GraphIndex.open(args.index, in_memory=args.device == "sim", alpha_prune=args.alpha_prune)
        base = index.vectors[: index.count]
    else:
        if args.device == "file":
            raise SystemExit("error: --device file needs --index")
        base = load_vectors(spec)
        cfg = IndexConfig(dim=base.shape[1], R=args.R, L_build=args.L_build, alpha_prune=args.alpha_prune)
        index = GraphIndex.build(base, cfg, seed=args.seed)
    params = QueryParams(args.K, args.L, args.W)
    queries = _queries(args, spec, base)
    if args.device == "file":
        device = FileDevice(args.index)
    else:
        device = SimulatedDevice(index.store, _profile(args))
    found, lat, ios, ratios = [], [], [], []
    try:
        for q in queries:
            res = beam_search(index, q, params, device=device)
            found.append(res.ids)
            lat.append(res.stats.latency)
            ios.append(res.stats.io_count)
            ratios.append(idle_ratio(res.stats))
    finally:
        if isinstance(device, FileDevice):
            device.close()
    truth = ground_truth(base, queries, params.K, exclude=index.tombstones)
    stats = LatencyStats.of(lat)
    out = {
        "queries": len(queries),
        "recall_at_k": recall_at_k(found, truth, params.K),
        "latency_us": stats.__dict__,
        "mean_ios": float(np.mean(ios)) if ios else None,
        "idle_ratio": float(np.mean(ratios)) if ratios else None,
        "clock": "virtual" if args.device == "sim" else "wall",
    }
    text = json.dumps(out, indent=2)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_bench(args) -> int:
    virtual = args.virtual_time if args.virtual_time is not None else args.device == "sim"
    if virtual and args.device == "file":
        raise SystemExit("error: virtual time runs on the simulated device; drop --device file or --virtual-time")
    if not virtual and args.device == "sim":
        raise SystemExit("error: wall-time runs need --device file")
    spec = WorkloadSpec(
        dataset=_dataset(args),
        R=args.R,
        L_build=args.L_build,
        alpha_prune=args.alpha_prune,
        K=args.K,
        L=args.L,
        W=args.W,
        search_threads=args.search_threads,
        update_threads=args.update_threads,
        delete_fraction=args.delete_fraction,
        insert_fraction=args.insert_fraction,
        theta=args.theta,
        device=_profile(args),
        budget_mode=args.mode.replace("-", "_"),
        k_sparse=args.k_sparse,
        epoch_length=args.epoch_length,
        statistics=tuple(args.statistics.split(",")),
        seed=args.seed,
        num_queries=args.num_queries,
        search_queries=args.search_queries,
        phase_order=args.phase_order,
        paired=not args.no_pair,
        baseline_only=args.baseline,
        virtual_time=virtual,
    )
    report = run_workload(spec, prepare(spec))
    if args.report:
        emit_report(report, args.report)
    print(json.dumps(_summary(report), indent=2))
    if report.error:
        print(f"run aborted: {report.error}", file=sys.stderr)
    return 0 if report.complete else 1


def _summary(report) -> dict:
    def run(r):
        if r is None:
            return None
        return {
            "recall_at_k": r.recall_at_k,
            "idle_ratio": r.idle_ratio,
            "tuner": {"phase": r.tuner_phase, "alpha": r.tuner_alpha},
            "failed_ops": r.failed_ops,
            "phases": {
                n: {"duration_us": p.duration_us, "mean_latency_us": p.latency.mean, "qps": p.qps,
                    "update_throughput": p.update_throughput}
                for n, p in r.phases.items()
            },
        }

    return {
        "complete": report.complete,
        "coexec": run(report.coexec),
        "baseline": run(report.baseline),
        "speedup": report.speedup,
        "degradation": report.degradation,
    }


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stallann", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build an index and write it to disk")
    _add_data_args(b)
    b.add_argument("--out", required=True, help="index file (codes go to OUT.sqv)")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("search", help="run queries and report recall and latency")
    _add_data_args(s)
    _add_query_args(s)
    s.add_argument("--index", help="saved index; built from the dataset when absent")
    s.add_argument("--num-queries", type=int, default=100)
    s.add_argument("--report", metavar="PATH")
    s.set_defaults(func=cmd_search)

    w = sub.add_parser("bench", help="delete/insert workload under saturated search")
    _add_data_args(w)
    _add_query_args(w)
    w.add_argument("--theta", type=float, default=0.05)
    w.add_argument("--search-threads", type=int, default=8)
    w.add_argument("--update-threads", type=int, default=1)
    w.add_argument("--delete-fraction", type=float, default=0.05)
    w.add_argument("--insert-fraction", type=float, default=0.05)
    w.add_argument("--mode", choices=("per-batch", "k-sparse"), default="per-batch")
    w.add_argument("--k-sparse", type=int, default=8)
    w.add_argument("--epoch-length", type=int, default=100, help="queries per tuner epoch")
    w.add_argument("--statistics", default="mean", help="mean | mean,p95 | mean,p95,p99")
    w.add_argument("--num-queries", type=int, default=100, help="distinct queries in the stream")
    w.add_argument("--search-queries", type=int, default=1000, help="queries in a pure-search run")
    w.add_argument("--phase-order", choices=sorted(PHASE_ORDERS), default="delete-insert")
    w.add_argument("--baseline", action="store_true", help="only the run with co-execution off")
    w.add_argument("--no-pair", action="store_true", help="skip the paired baseline run")
    w.add_argument("--virtual-time", action=argparse.BooleanOptionalAction, default=None,
                   help="simulated clock (default with --device sim)")
    w.add_argument("--report", metavar="PATH", help="JSON report; CSVs are written beside it")
    w.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
