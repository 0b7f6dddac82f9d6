"""Paired co-execution / baseline runs across theta: speedup, degradation, tuner alpha."""

import argparse
import json

from stallann.bench.datasets import DatasetSpec
from stallann.bench.report import emit_report
from stallann.bench.runner import WorkloadSpec, prepare, run_workload
from stallann.io_layer import DeviceProfile


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--thetas", default="0,0.02,0.05,0.1")
    ap.add_argument("--threads", type=int, default=8)
    ap.add_argument("--statistics", default="mean")
    ap.add_argument("--report-dir", help="write one JSON+CSV report per theta here")
    args = ap.parse_args()

    base = WorkloadSpec(
        dataset=DatasetSpec(n=args.n, dim=16, clusters=64),
        search_threads=args.threads,
        device=DeviceProfile.lognormal(seed=0),
        statistics=tuple(args.statistics.split(",")),
    )
    prep = prepare(base)
    rows = []
    for theta in (float(t) for t in args.thetas.split(",")):
        spec = WorkloadSpec(**{**vars(base), "theta": theta})
        r = run_workload(spec, prep)
        if args.report_dir:
            emit_report(r, f"{args.report_dir}/theta_{theta:g}.json")
        rows.append({
            "theta": theta,
            "speedup": r.speedup,
            "degradation": r.degradation,
            "alpha": r.coexec.tuner_alpha,
            "phase": r.coexec.tuner_phase,
            "recall": r.coexec.recall_at_k,
        })
        print(json.dumps(rows[-1]))


if __name__ == "__main__":
    main()
