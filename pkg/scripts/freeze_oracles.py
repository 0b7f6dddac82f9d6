"""Evaluate the test oracles on their fixed fixtures and freeze the outputs.

Run once when a fixture changes; the tests then compare both the oracle and the
implementation against the frozen file.
"""

import json
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "tests"))

import oracles  # noqa: E402

OUT = os.path.join(HERE, "..", "tests", "frozen", "oracle_values.json")

# Worked prune instance: target at the origin, six candidates, alpha 1.2, R 3.
WORKED = {
    "target": [0.0, 0.0],
    "candidates": [[1.0, 0.0], [1.5, 0.1], [0.0, 1.6], [1.8, -0.3], [-1.9, 0.0], [0.0, -2.0]],
    "alpha": 1.2,
    "R": 3,
}

CI_SAMPLES = [812.0, 790.5, 1033.25, 640.0, 905.75, 777.0, 1210.5, 698.0]


def main() -> None:
    cands = list(enumerate(WORKED["candidates"]))
    values = {
        "budget": {
            "pair_theta_0.1": oracles.grid_budget([100, 300], 0.1),
            "ksparse_4_theta_0.1": oracles.grid_budget([10, 10, 10, 100], 0.1, k_sparse=4),
            "three_theta_0": oracles.grid_budget([50, 100, 150], 0.0),
            "constant_theta_0": oracles.grid_budget([80, 80, 80, 80], 0.0),
        },
        "device": {
            "four_with_penalty_10": oracles.device_oracle([("submit", 0.0, [0, 1, 2, 3]), ("poll", 1e9)], 100.0, 10.0),
        },
        "worked_prune": {
            "instance": WORKED,
            "final": oracles.prune_oracle(WORKED["target"], cands, WORKED["alpha"], WORKED["R"]),
        },
        "ci95": {"samples": CI_SAMPLES, "half_width": oracles.ci95_by_hand(CI_SAMPLES)},
        "distance_3_4_5": oracles.l2([0, 0], [3, 4]),
    }
    with open(OUT, "w") as f:
        json.dump(values, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(values, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
