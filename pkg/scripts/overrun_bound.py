"""Per-hop stall inflation of co-execution versus a paired baseline, across theta.

Every granted budget is used in full (alpha fixed at 1), so the only guard on
stall growth is the budget solver. Prints one row per theta.
"""

import argparse

from stallann.bench.datasets import DatasetSpec
from stallann.bench.runner import WorkloadSpec, prepare, run_workload
from stallann.io_layer import DeviceProfile


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--threads", type=int, default=28)
    ap.add_argument("--thetas", default="0.02,0.05,0.1,0.2")
    ap.add_argument("--mode", choices=("per_batch", "k_sparse"), default="per_batch")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    base = WorkloadSpec(
        dataset=DatasetSpec(n=args.n, dim=16, clusters=32, seed=4),
        L=50,
        search_threads=args.threads,
        device=DeviceProfile.lognormal(seed=args.seed),
        delete_fraction=0.2,
        insert_fraction=0.1,
        fixed_alpha=1.0,
        num_queries=200,
        budget_mode=args.mode,
    )
    prep = prepare(base)
    print(f"{'theta':>6} {'infl_delete':>12} {'infl_insert':>12} {'speedup':>8} {'slices':>7}")
    for theta in (float(t) for t in args.thetas.split(",")):
        spec = WorkloadSpec(**{**vars(base), "theta": theta})
        r = run_workload(spec, prep)
        infl = r.stall_inflation
        print(f"{theta:6.3f} {infl['delete']:12.4f} {infl['insert']:12.4f} "
              f"{r.speedup['total']:8.2f} {r.coexec.slices:7d}")


if __name__ == "__main__":
    main()
