"""Per-tile timing models: matrix engine, vector engine, DMA, HBM channels.

All functions are pure closed forms over immutable job descriptions.  The
discrete-event simulator composes them with resource queues; they are also
used standalone by the tiling autotuner and the wafer estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .arch import HbmSpec, TileSpec


@dataclass(frozen=True, slots=True)
class GemmJob:
    """Dense matmul of an (m x k) by (k x n) operand pair on one tile."""

    m: int
    n: int
    k: int
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        if min(self.m, self.n, self.k) < 1:
            raise ValueError("GemmJob dims must be >= 1")

    @property
    def flops(self) -> int:
        return 2 * self.m * self.n * self.k


class VectorKind(str, Enum):
    ROWMAX = "rowmax"
    ROWSUM = "rowsum"
    EXP = "exp"
    SCALE_ACCUMULATE = "scale_accumulate"
    ADD = "add"
    ROPE = "rope"
    RMSNORM = "rmsnorm"


# FLOPs charged per element; engine peak rates come from TileSpec.
VECTOR_FLOPS_PER_ELEM: dict[VectorKind, int] = {
    VectorKind.ROWMAX: 1,
    VectorKind.ROWSUM: 1,
    VectorKind.EXP: 1,
    VectorKind.SCALE_ACCUMULATE: 2,
    VectorKind.ADD: 1,
    VectorKind.ROPE: 4,
    VectorKind.RMSNORM: 3,
}

# Bytes moved per element (operand reads + result writes) in dtype units.
VECTOR_BYTES_PER_ELEM: dict[VectorKind, float] = {
    VectorKind.ROWMAX: 1.5,
    VectorKind.ROWSUM: 1.5,
    VectorKind.EXP: 2.0,
    VectorKind.SCALE_ACCUMULATE: 3.0,
    VectorKind.ADD: 3.0,
    VectorKind.ROPE: 2.0,
    VectorKind.RMSNORM: 2.0,
}


@dataclass(frozen=True, slots=True)
class VectorJob:
    kind: VectorKind
    elements: int
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        if self.elements < 0:
            raise ValueError("VectorJob elements must be >= 0")


@dataclass(frozen=True, slots=True)
class HbmRequest:
    channel: int
    size: int
    direction: str  # "read" | "write"

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("HbmRequest size must be > 0")
        if self.direction not in ("read", "write"):
            raise ValueError("direction must be 'read' or 'write'")


def gemm_cycles(job: GemmJob, tile: TileSpec) -> int:
    """CE-array passes: the m x n output is swept in rows x cols blocks, each
    block streaming k MACs; plus a fixed engine setup."""
    passes = math.ceil(job.m / tile.matrix_ce_rows) * math.ceil(
        job.n / tile.matrix_ce_cols
    )
    return passes * job.k + tile.matrix_setup_cycles


def gemm_utilization(job: GemmJob, tile: TileSpec) -> float:
    """Achieved fraction of matrix-engine peak for one job."""
    ideal = job.flops / tile.matrix_peak_flop_per_cycle
    return ideal / gemm_cycles(job, tile)


def vector_cycles(job: VectorJob, tile: TileSpec) -> int:
    """Max of the FLOP-bound and the L1-bandwidth-bound closed forms."""
    if job.elements == 0:
        return 0
    compute = math.ceil(
        job.elements * VECTOR_FLOPS_PER_ELEM[job.kind] / tile.vector_lanes_flop_per_cycle
    )
    bytes_moved = job.elements * job.dtype_bytes * VECTOR_BYTES_PER_ELEM[job.kind]
    memory = math.ceil(bytes_moved / tile.l1_bandwidth)
    return max(compute, memory)


def hbm_service(reqs: list[HbmRequest], hbm: HbmSpec) -> list[float]:
    """FIFO per channel at channel_bytes_per_cycle, flat access latency per
    request (latency is pipelined: the channel is busy only for the burst)."""
    free = [0.0] * hbm.num_channels
    done: list[float] = []
    for r in reqs:
        if not (0 <= r.channel < hbm.num_channels):
            raise ValueError(f"channel {r.channel} out of range")
        grant = free[r.channel]
        burst = r.size / hbm.channel_bytes_per_cycle
        free[r.channel] = grant + burst
        done.append(grant + burst + hbm.access_latency)
    return done
