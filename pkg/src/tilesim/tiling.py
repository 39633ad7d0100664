"""Tile-size and group-shape selection for flat attention.

Searches power-of-two score-slice sizes, keeping those whose worst-case
matmul (either Q@K^T or P@V) sustains at least 95% of matrix-engine
throughput and whose working set fits L1, then picks the largest survivor
(larger slices amortize collective latency and the matmul issue gap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .arch import ArchConfig
from .dataflows import FlatParams
from .engines import GemmJob, gemm_utilization
from .noc import Strategy
from .numerics import AttentionWorkload, Variant

SLICE_CANDIDATES = (16, 32, 64, 128, 256, 512)
UTILIZATION_FLOOR = 0.95


@dataclass(frozen=True, slots=True)
class TilingChoice:
    slice_r: int
    slice_c: int
    G_x: int
    G_y: int
    utilization: float
    footprint_bytes: int


def _score_dims(workload: AttentionWorkload) -> tuple[int, int]:
    """(query/key feature dim, value feature dim) of the scheduled problem."""
    if workload.variant is Variant.MLA_DECODE_ABSORBED:
        return workload.d_c + workload.d_rope, workload.d_c
    return workload.D, workload.dv


def l1_footprint(
    workload: AttentionWorkload,
    slice_r: int,
    slice_c: int,
    D: int,
    async_: bool = False,
) -> int:
    """Per-tile working set of one flat-attention slice.

    Synchronous mode double-buffers K/V (prefetch of the next KV block);
    async mode doubles the full set (two instances in counterphase).
    """
    if slice_r == 0 or slice_c == 0:
        return 0
    dt = workload.dtype_bytes
    dv = _score_dims(workload)[1]
    q = slice_r * D * dt
    k = slice_c * D * dt
    v = slice_c * dv * dt
    s = slice_r * slice_c * dt
    o = slice_r * dv * dt
    stats = 2 * slice_r * 4
    if async_:
        return 2 * (q + k + v + s + o + stats)
    return q + 2 * (k + v) + s + o + stats


def _slice_utilization(
    workload: AttentionWorkload, slice_r: int, slice_c: int, arch: ArchConfig
) -> float:
    """Worst of the two per-iteration matmuls.  When the workload cannot
    supply a full engine row block (decode with few effective rows), rows are
    judged at the engine's row granularity instead of penalizing the
    unavoidable short dimension."""
    tile = arch.tile
    d_qk, dv = _score_dims(workload)
    dt = workload.dtype_bytes
    m = slice_r
    if workload.s_q_eff < tile.matrix_ce_rows:
        m = tile.matrix_ce_rows
    u_score = gemm_utilization(GemmJob(m, slice_c, d_qk, dt), tile)
    u_value = gemm_utilization(GemmJob(m, dv, slice_c, dt), tile)
    return min(u_score, u_value)


def select_tiling(
    workload: AttentionWorkload, arch: ArchConfig, async_: bool = False
) -> TilingChoice:
    """Pick the largest slice meeting the utilization floor and L1 capacity,
    then derive the group shape that covers the effective query rows and (for
    decode) one KV block per mesh row."""
    d_qk, _ = _score_dims(workload)
    rows_total = workload.s_q_eff
    best: tuple[int, int, float, int] | None = None
    for c in SLICE_CANDIDATES:
        slice_r = min(c, rows_total)
        util = _slice_utilization(workload, slice_r, c, arch)
        fp = l1_footprint(workload, slice_r, c, d_qk, async_)
        if util >= UTILIZATION_FLOOR and fp <= arch.tile.l1_capacity:
            best = (slice_r, c, util, fp)
    if best is None:
        raise ValueError(
            "no slice size sustains the matrix engine within L1 capacity; "
            "use a smaller dtype or a larger L1"
        )
    slice_r, slice_c, util, fp = best
    mesh_x, mesh_y = arch.noc.mesh_x, arch.noc.mesh_y
    G_y = min(mesh_y, math.ceil(rows_total / slice_r))
    kv_block = min(workload.S_kv, mesh_x * slice_c)
    G_x = min(mesh_x, math.ceil(kv_block / slice_c))
    return TilingChoice(slice_r, slice_c, G_x, G_y, util, fp)


def select_tiling_for_group(
    workload: AttentionWorkload,
    arch: ArchConfig,
    G_x: int,
    G_y: int,
    async_: bool = False,
) -> TilingChoice:
    """Slice sizes for an externally fixed group shape: the unconstrained
    optimum, shrunk so the group spans at most the whole problem."""
    opt = select_tiling(workload, arch, async_)
    slice_r = min(opt.slice_r, max(1, math.ceil(workload.s_q_eff / G_y)))
    slice_c = min(opt.slice_c, max(1, math.ceil(workload.S_kv / G_x)))
    util = _slice_utilization(workload, slice_r, slice_c, arch)
    d_qk, _ = _score_dims(workload)
    fp = l1_footprint(workload, slice_r, slice_c, d_qk, async_)
    return TilingChoice(slice_r, slice_c, G_x, G_y, util, fp)


def params_for_workload(
    workload: AttentionWorkload,
    arch: ArchConfig,
    *,
    strategy: Strategy = Strategy.HW,
    async_: bool = False,
    group: tuple[int, int] | None = None,
) -> FlatParams:
    """Autotune (or adapt to a fixed group) and package as FlatParams."""
    if group is None:
        ch = select_tiling(workload, arch, async_)
    else:
        ch = select_tiling_for_group(workload, arch, group[0], group[1], async_)
    return FlatParams.make(ch.G_x, ch.G_y, ch.slice_r, ch.slice_c, strategy, async_)
