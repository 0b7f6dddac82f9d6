"""CPU cost model for virtual-time runs.

On a virtual clock, compute only advances time through these charges. The
defaults put a W=4, L=100 hop at roughly 75us of compute against a ~225us stall
(the slowest of four reads at the default lognormal profile), about a 75% idle
ratio, and a per-vector delete repair at 1-3ms.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class CostModel:
    # search side
    hop_overhead_us: float = 45.0
    record_decode_us: float = 5.0
    approx_distance_us: float = 0.5
    exact_distance_us: float = 1.0
    # update side
    prune_iteration_us: float = 0.5
    update_distance_us: float = 0.5
    scan_record_us: float = 0.2
    write_record_us: float = 2.0

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.prune_iteration_us <= 0:
            raise ValueError("prune_iteration_us must be > 0")

    @classmethod
    def free(cls) -> "CostModel":
        """Charges nothing except a minimal per-iteration tick for prune slicing."""
        return cls(
            hop_overhead_us=0.0,
            record_decode_us=0.0,
            approx_distance_us=0.0,
            exact_distance_us=0.0,
            prune_iteration_us=1e-9,
            update_distance_us=0.0,
            scan_record_us=0.0,
            write_record_us=0.0,
        )
