"""Operation, allocation, and memory instrumentation shared by the solvers.

Counters are plain objects passed explicitly; nothing here is thread-safe
on its own.  In the multi-worker simulation each worker owns a private
``SolveStats`` and the driver merges them.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass
class SolveStats:
    """Multiply-add and row-update accounting for one solver run."""

    flops: int = 0
    rows_updated: int = 0
    rows_skipped: int = 0  # singular normal equations at lambda=0; values retained

    def merge(self, other: "SolveStats") -> None:
        self.flops += other.flops
        self.rows_updated += other.rows_updated
        self.rows_skipped += other.rows_skipped


@dataclass
class ResidencyMeter:
    """Tracks how many factor values are resident at once.

    The streaming engine routes every factor-column load/release through
    one meter, so ``peak`` bounds the live factor-value footprint.
    """

    current: int = 0
    peak: int = 0

    def add(self, count: int) -> None:
        self.current += count
        if self.current > self.peak:
            self.peak = self.current

    def release(self, count: int) -> None:
        self.current -= count


# Number of full-length augmented-residual buffers allocated so far.  The
# fused coordinate-descent path must leave this untouched.
_rhat_buffers = 0


def note_rhat_allocation() -> None:
    global _rhat_buffers
    _rhat_buffers += 1


def rhat_allocations() -> int:
    return _rhat_buffers


def reset_rhat_allocations() -> None:
    global _rhat_buffers
    _rhat_buffers = 0
