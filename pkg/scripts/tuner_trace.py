"""Closed-loop tuner trace against a synthetic plant (latency ratio 1 + 0.1 alpha + noise).

Writes epoch, phase, alpha and observed ratio as CSV; prints a short summary.
"""

import argparse
import csv
import sys

import numpy as np

from stallann.tuner import LatencyObservation, TunerConfig, TunerPhase, TunerState, step


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--theta", type=float, default=0.05)
    ap.add_argument("--gain", type=float, default=0.1, help="ratio increase at alpha = 1")
    ap.add_argument("--noise", type=float, default=0.02, help="std dev of the per-epoch ratio noise")
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (default stdout)")
    args = ap.parse_args()

    cfg = TunerConfig(theta=args.theta)
    rng = np.random.default_rng(args.seed)
    state, alpha = TunerState(), 0.0
    rows = []
    for epoch in range(1, args.epochs + 1):
        ratio = 1.0 + args.gain * alpha + rng.normal(0.0, args.noise)
        state, alpha = step(state, LatencyObservation(mean=100.0 * ratio, count=cfg.epoch_length), cfg)
        rows.append((epoch, state.phase.value, round(state.alpha, 5), round(ratio, 5)))

    f = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(f)
    w.writerow(["epoch", "phase", "alpha", "ratio"])
    w.writerows(rows)
    if args.out:
        f.close()
    tail = rows[-100:]
    first_steady = next((r[0] for r in rows if r[1] == TunerPhase.STEADY.value), None)
    print(
        f"first Steady epoch {first_steady}; trailing-100 mean ratio {np.mean([r[3] for r in tail]):.4f}, "
        f"mean alpha {np.mean([r[2] for r in tail]):.3f}; analytic alpha at the target {args.theta / args.gain:.3f}",
        file=sys.stderr,
    )


if __name__ == "__main__":
    main()
