"""Deterministic discrete-event execution of per-tile step programs.

A :class:`Schedule` is a DAG of typed steps over mesh tiles.  The simulator
honors dependencies and resource exclusivity: one matmul at a time per matrix
engine (with a fixed reconfiguration gap between invocations), one vector op
per vector engine, per-tile DMA channels, FIFO HBM channels, and
link-occupancy serialization for transfers and collectives.

Events are ordered by (ready time, step id), which makes runs bit-identical
for identical inputs.  In functional mode each step additionally executes its
numeric kernel on real float64 buffer payloads; payloads never affect timing.

Exposed-time attribution: at every cycle the report charges the busy
category with the highest priority (matrix > vector > comm > hbm > sync);
idle dependency-wait gaps and engine reconfiguration gaps are charged to
sync_overhead, so the five categories sum exactly to total_cycles.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator

import numpy as np

from .arch import ArchConfig
from .engines import GemmJob, VectorJob, gemm_cycles, vector_cycles
from .noc import (
    Axis,
    CollectiveKind,
    CollectiveRequest,
    LinkTimeline,
    Strategy,
    TileCoord,
    collective_time,
    route_xy,
    span_links,
)
from . import numerics


class SimError(RuntimeError):
    """Raised for runtime schedule failures (L1 overflow, deadlock)."""


class StepKind(str, Enum):
    HBM_LOAD = "HbmLoad"
    HBM_STORE = "HbmStore"
    MULTICAST = "Multicast"
    REDUCE = "Reduce"
    MATMUL = "MatMul"
    VECTOR_OP = "VectorOp"
    BARRIER = "Barrier"
    LOCAL_COPY = "LocalCopy"


@dataclass(slots=True)
class HbmXferPayload:
    """HBM load/store of one 2D block between DRAM and an L1 buffer."""

    buffer: str
    size: int
    shape: tuple[int, int] | None = None
    dram: str | None = None
    index: tuple | None = None
    rows: tuple[int, int] | None = None
    cols: tuple[int, int] | None = None
    scale: float = 1.0


@dataclass(slots=True)
class CollectivePayload:
    """Row/column multicast or reduction across a contiguous tile span."""

    kind: CollectiveKind
    axis: Axis
    strategy: Strategy
    root: TileCoord
    members: tuple[TileCoord, ...]
    size: int
    src: str
    dst: str


@dataclass(slots=True)
class UnicastPayload:
    """Point-to-point buffer copy over the mesh (XY route)."""

    src_tile: TileCoord
    dst_tile: TileCoord
    size: int
    src: str
    dst: str


@dataclass(slots=True)
class MatMulPayload:
    job: GemmJob
    a: str
    b: str
    out: str
    transpose_b: bool = False
    accumulate: bool = False
    b_col_range: tuple[int, int] | None = None


@dataclass(slots=True)
class VectorPayload:
    """Vector-engine kernel; ``op`` selects the functional semantics."""

    job: VectorJob
    op: str
    inputs: tuple[str, ...] = ()
    output: str | None = None
    out_shape: tuple[int, ...] | None = None
    out_bytes: int = 0
    fill: float = 0.0
    mask: np.ndarray | None = None
    positions: np.ndarray | None = None


@dataclass(slots=True)
class BarrierPayload:
    tiles: tuple[TileCoord, ...]


@dataclass(slots=True)
class LocalCopyPayload:
    src: str
    dst: str
    size: int


@dataclass(slots=True)
class Step:
    id: int
    tile: TileCoord
    kind: StepKind
    payload: Any
    deps: tuple[int, ...] = ()


@dataclass(slots=True)
class Schedule:
    steps: list[Step]
    group_shape: tuple[int, int] = (1, 1)
    metadata: dict = field(default_factory=dict)
    dram: dict[str, np.ndarray] | None = None
    outputs: tuple[str, ...] = ()


@dataclass(slots=True)
class ValidationResult:
    ok: bool
    violations: tuple[str, ...] = ()


EXPOSED_CATEGORIES = (
    "matrix_engine",
    "vector_softmax",
    "inter_tile_comm",
    "hbm_access",
    "sync_overhead",
)


@dataclass(slots=True)
class SimReport:
    total_cycles: float
    exposed: dict[str, float]
    engine_busy: dict[TileCoord, dict[str, float]]
    hbm_bytes_read: int
    hbm_bytes_written: int
    matrix_utilization: float
    matrix_utilization_overall: float
    avg_hbm_bw_utilization: float
    matmul_flops: int
    outputs: dict[str, np.ndarray] | None = None

    def to_row(self) -> dict[str, float]:
        """Flat record for CSV serialization."""
        row = {
            "total_cycles": self.total_cycles,
            "hbm_bytes_read": self.hbm_bytes_read,
            "hbm_bytes_written": self.hbm_bytes_written,
            "matrix_utilization": self.matrix_utilization,
            "matrix_utilization_overall": self.matrix_utilization_overall,
            "avg_hbm_bw_utilization": self.avg_hbm_bw_utilization,
            "matmul_flops": self.matmul_flops,
        }
        for cat in EXPOSED_CATEGORIES:
            row[f"exposed_{cat}"] = self.exposed[cat]
        return row


def _payload_reads(step: Step) -> Iterator[tuple[TileCoord, str]]:
    p = step.payload
    k = step.kind
    if k is StepKind.HBM_STORE:
        yield (step.tile, p.buffer)
    elif k is StepKind.MULTICAST:
        if isinstance(p, UnicastPayload):
            yield (p.src_tile, p.src)
        else:
            yield (p.root, p.src)
    elif k is StepKind.REDUCE:
        for m in p.members:
            yield (m, p.src)
    elif k is StepKind.MATMUL:
        yield (step.tile, p.a)
        yield (step.tile, p.b)
        if p.accumulate:
            yield (step.tile, p.out)
    elif k is StepKind.VECTOR_OP:
        for b in p.inputs:
            yield (step.tile, b)
    elif k is StepKind.LOCAL_COPY:
        yield (step.tile, p.src)


def _payload_writes(step: Step) -> Iterator[tuple[TileCoord, str, int]]:
    p = step.payload
    k = step.kind
    if k is StepKind.HBM_LOAD:
        yield (step.tile, p.buffer, p.size)
    elif k is StepKind.MULTICAST:
        if isinstance(p, UnicastPayload):
            yield (p.dst_tile, p.dst, p.size)
        else:
            for m in p.members:
                if m != p.root or p.dst != p.src:
                    yield (m, p.dst, p.size)
    elif k is StepKind.REDUCE:
        yield (p.root, p.dst, p.size)
    elif k is StepKind.MATMUL:
        yield (step.tile, p.out, p.job.m * p.job.n * p.job.dtype_bytes)
    elif k is StepKind.VECTOR_OP:
        if p.output is not None:
            yield (step.tile, p.output, p.out_bytes)
    elif k is StepKind.LOCAL_COPY:
        yield (step.tile, p.dst, p.size)


def check_schedule(schedule: Schedule, arch: ArchConfig) -> ValidationResult:
    """Static validation: acyclicity, def-before-use, L1 footprint, bounds."""
    v: list[str] = []
    steps = schedule.steps
    for i, s in enumerate(steps):
        if s.id != i:
            v.append(f"step ids must be dense and ordered (step {s.id} at {i})")
            return ValidationResult(False, tuple(v))
    mesh_x, mesh_y = arch.noc.mesh_x, arch.noc.mesh_y

    def in_mesh(t: TileCoord) -> bool:
        return 0 <= t.x < mesh_x and 0 <= t.y < mesh_y

    cyclic = False
    for s in steps:
        for d in s.deps:
            if d == s.id:
                v.append(f"step {s.id} depends on itself (cycle)")
                cyclic = True
            elif not 0 <= d < len(steps):
                v.append(f"step {s.id} has out-of-range dep {d}")
                cyclic = True
            elif d > s.id:
                # Steps are emitted in topological order; a forward dep would
                # need a full cycle check, which the builder never produces.
                v.append(f"step {s.id} has forward dep {d} (emission order)")
                cyclic = True

    written: set[tuple[TileCoord, str]] = set()
    sizes: dict[tuple[TileCoord, str], int] = {}
    for s in steps:
        if not in_mesh(s.tile):
            v.append(f"step {s.id} tile {tuple(s.tile)} outside mesh")
        if s.kind in (StepKind.MULTICAST, StepKind.REDUCE) and isinstance(
            s.payload, CollectivePayload
        ):
            if (
                s.payload.strategy is Strategy.HW
                and not arch.noc.hw_collectives_enabled
            ):
                v.append(f"step {s.id} uses HW collectives but they are disabled")
        if not cyclic:
            for tile, buf in _payload_reads(s):
                if (tile, buf) not in written:
                    v.append(
                        f"step {s.id} reads buffer '{buf}' on {tuple(tile)} "
                        "before any write"
                    )
            for tile, buf, size in _payload_writes(s):
                written.add((tile, buf))
                key = (tile, buf)
                sizes[key] = max(sizes.get(key, 0), size)

    footprint: dict[TileCoord, int] = {}
    for (tile, _), size in sizes.items():
        footprint[tile] = footprint.get(tile, 0) + size
    cap = arch.tile.l1_capacity
    for tile in sorted(footprint):
        if footprint[tile] > cap:
            v.append(
                f"tile {tuple(tile)} L1 footprint {footprint[tile]} B exceeds "
                f"capacity {cap} B"
            )
    return ValidationResult(ok=not v, violations=tuple(v))


# --- functional kernels -----------------------------------------------------


def _exec_vector(p: VectorPayload, get, put) -> None:
    op = p.op
    if op == "init":
        put(p.output, np.full(p.out_shape, p.fill, dtype=np.float64))
    elif op == "rowmax":
        put(p.output, get(p.inputs[0]).max(axis=1))
    elif op == "rowsum":
        put(p.output, get(p.inputs[0]).sum(axis=1))
    elif op == "ewise_max":
        put(p.output, np.maximum(get(p.inputs[0]), get(p.inputs[1])))
    elif op == "exp_sub":
        s, m = get(p.inputs[0]), get(p.inputs[1])
        put(p.output, numerics.safe_exp_shift(s, m[:, None]))
    elif op == "denom_update":
        l, m_old, m_new, lb = (get(b) for b in p.inputs)
        carry = numerics.safe_exp_shift(m_old, m_new)
        put(p.output, carry * l + lb)
    elif op == "rescale":
        o, m_old, m_new = (get(b) for b in p.inputs)
        put(p.output, numerics.safe_exp_shift(m_old, m_new)[:, None] * o)
    elif op == "normalize":
        o, l = get(p.inputs[0]), get(p.inputs[1])
        denom = np.where(l == 0.0, 1.0, l)
        put(p.output, o / denom[:, None])
    elif op == "mask_scores":
        s = get(p.inputs[0])
        put(p.output, np.where(p.mask, s, -np.inf))
    elif op == "add":
        put(p.output, get(p.inputs[0]) + get(p.inputs[1]))
    elif op == "rope":
        put(p.output, numerics.rope(get(p.inputs[0]), p.positions))
    elif op == "rmsnorm":
        put(p.output, numerics.rmsnorm(get(p.inputs[0]), get(p.inputs[1])))
    elif op == "copy":
        put(p.output, get(p.inputs[0]).copy())
    elif op == "noop":
        pass
    else:
        raise SimError(f"unknown vector op '{op}'")


def _exec_step(step: Step, buffers: dict, dram: dict[str, np.ndarray]) -> None:
    p = step.payload
    k = step.kind

    def get(name: str, tile: TileCoord = step.tile) -> np.ndarray:
        return buffers[(tile, name)]

    def put(name: str, value: np.ndarray, tile: TileCoord = step.tile) -> None:
        buffers[(tile, name)] = value

    if k is StepKind.HBM_LOAD:
        arr = dram[p.dram]
        if p.index is not None:
            arr = arr[p.index]
        r, c = p.rows, p.cols
        block = arr[r[0] : r[1], c[0] : c[1]].astype(np.float64)
        put(p.buffer, block * p.scale if p.scale != 1.0 else block)
    elif k is StepKind.HBM_STORE:
        arr = dram[p.dram]
        if p.index is not None:
            arr = arr[p.index]
        r, c = p.rows, p.cols
        arr[r[0] : r[1], c[0] : c[1]] = get(p.buffer)
    elif k is StepKind.MULTICAST:
        if isinstance(p, UnicastPayload):
            put(p.dst, get(p.src, p.src_tile).copy(), p.dst_tile)
        else:
            src = get(p.src, p.root)
            for m in p.members:
                if m != p.root or p.dst != p.src:
                    put(p.dst, src.copy(), m)
    elif k is StepKind.REDUCE:
        vals = [get(p.src, m) for m in p.members]
        acc = vals[0]
        combine = np.maximum if p.kind is CollectiveKind.REDUCE_MAX else np.add
        for other in vals[1:]:
            acc = combine(acc, other)
        put(p.dst, acc, p.root)
    elif k is StepKind.MATMUL:
        a, b = get(p.a), get(p.b)
        if p.b_col_range is not None:
            b = b[:, p.b_col_range[0] : p.b_col_range[1]]
        r = a @ (b.T if p.transpose_b else b)
        if p.accumulate:
            put(p.out, get(p.out) + r)
        else:
            put(p.out, r)
    elif k is StepKind.VECTOR_OP:
        _exec_vector(p, get, put)
    elif k is StepKind.LOCAL_COPY:
        put(p.dst, get(p.src).copy())
    # Barrier: no data movement.


# --- attribution ------------------------------------------------------------


def _merge_intervals(ivals: list[tuple[float, float]]):
    arr = np.asarray(ivals, dtype=np.float64)
    s = arr[:, 0]
    e = arr[:, 1]
    order = np.argsort(s, kind="stable")
    s, e = s[order], e[order]
    cme = np.maximum.accumulate(e)
    new_seg = np.empty(len(s), dtype=bool)
    new_seg[0] = True
    new_seg[1:] = s[1:] > cme[:-1]
    starts = s[new_seg]
    ends = np.maximum.reduceat(e, np.flatnonzero(new_seg))
    return starts, ends


def _attribute(
    intervals: dict[str, list[tuple[float, float]]], total: float
) -> dict[str, float]:
    exposed = {cat: 0.0 for cat in EXPOSED_CATEGORIES}
    if total <= 0:
        return exposed
    merged = {}
    pieces = [np.array([0.0, total])]
    for cat in EXPOSED_CATEGORIES:
        if intervals[cat]:
            starts, ends = _merge_intervals(intervals[cat])
            merged[cat] = (starts, ends)
            pieces.append(starts)
            pieces.append(ends)
    boundary = np.unique(np.concatenate(pieces))
    boundary = boundary[(boundary >= 0.0) & (boundary <= total)]
    lo, hi = boundary[:-1], boundary[1:]
    mid = (lo + hi) * 0.5
    length = hi - lo
    remaining = np.ones(mid.shape, dtype=bool)
    for cat in EXPOSED_CATEGORIES:
        if cat not in merged:
            continue
        starts, ends = merged[cat]
        idx = np.searchsorted(starts, mid, side="right") - 1
        covered = (idx >= 0) & (mid < ends[np.maximum(idx, 0)])
        take = covered & remaining
        exposed[cat] = float(length[take].sum())
        remaining &= ~take
    # Residual dependency-wait time is synchronization overhead; absorb float
    # rounding there too so the categories sum to total_cycles exactly.
    exposed["sync_overhead"] += total - sum(exposed.values())
    return exposed


# --- simulator --------------------------------------------------------------


def simulate(
    schedule: Schedule, arch: ArchConfig, mode: str = "timing"
) -> SimReport:
    """Execute a schedule; deterministic for identical inputs."""
    if mode not in ("timing", "functional"):
        raise ValueError(f"unknown mode '{mode}'")
    functional = mode == "functional"
    steps = schedule.steps
    n = len(steps)
    for i, s in enumerate(steps):
        if s.id != i:
            raise SimError(f"step ids must be dense and ordered (got {s.id} at {i})")

    tile = arch.tile
    hbm = arch.hbm
    noc_spec = arch.noc
    gap = tile.matrix_issue_gap_cycles
    ch_bw = hbm.channel_bytes_per_cycle
    latency = hbm.access_latency
    dma_setup = tile.dma_setup_cycles

    dependents: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for s in steps:
        indeg[s.id] = len(s.deps)
        for d in s.deps:
            if not 0 <= d < n:
                raise SimError(f"step {s.id} has out-of-range dep {d}")
            dependents[d].append(s.id)

    ready_at = [0.0] * n
    heap = [(0.0, i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)

    mat_free: dict[TileCoord, float] = {}
    vec_free: dict[TileCoord, float] = {}
    dma_free: dict[TileCoord, list[float]] = {}
    hbm_free = [0.0] * hbm.num_channels
    links = LinkTimeline(noc_spec)
    span_cache: dict[tuple, list] = {}

    intervals: dict[str, list[tuple[float, float]]] = {
        cat: [] for cat in EXPOSED_CATEGORIES
    }
    busy_mat: dict[TileCoord, float] = {}
    busy_vec: dict[TileCoord, float] = {}
    mm_first: dict[TileCoord, float] = {}
    mm_last: dict[TileCoord, float] = {}
    flops = 0
    bytes_read = 0
    bytes_written = 0

    buffers: dict = {}
    # Snapshot DRAM so stores never mutate caller-owned arrays and repeated
    # functional runs of one schedule stay independent.
    dram = (
        {name: np.array(arr) for name, arr in schedule.dram.items()}
        if (functional and schedule.dram)
        else {}
    )

    completions = [0.0] * n
    processed = 0

    while heap:
        t, sid = heapq.heappop(heap)
        step = steps[sid]
        p = step.payload
        kind = step.kind

        if kind is StepKind.MATMUL:
            cycles = gemm_cycles(p.job, tile)
            start = max(t, mat_free.get(step.tile, 0.0))
            end = start + cycles
            mat_free[step.tile] = end + gap
            intervals["matrix_engine"].append((start, end))
            busy_mat[step.tile] = busy_mat.get(step.tile, 0.0) + cycles
            if step.tile not in mm_first:
                mm_first[step.tile] = start
            mm_last[step.tile] = end
            flops += p.job.flops
        elif kind is StepKind.VECTOR_OP:
            cycles = vector_cycles(p.job, tile)
            if cycles:
                start = max(t, vec_free.get(step.tile, 0.0))
                end = start + cycles
                vec_free[step.tile] = end
                intervals["vector_softmax"].append((start, end))
                busy_vec[step.tile] = busy_vec.get(step.tile, 0.0) + cycles
            else:
                end = t
        elif kind is StepKind.LOCAL_COPY:
            cycles = -(-2 * p.size // tile.l1_bandwidth)
            start = max(t, vec_free.get(step.tile, 0.0))
            end = start + cycles
            vec_free[step.tile] = end
            intervals["vector_softmax"].append((start, end))
            busy_vec[step.tile] = busy_vec.get(step.tile, 0.0) + cycles
        elif kind in (StepKind.HBM_LOAD, StepKind.HBM_STORE):
            chans = dma_free.setdefault(step.tile, [0.0] * tile.dma_channels)
            ci = min(range(len(chans)), key=lambda i: (chans[i], i))
            d0 = max(t, chans[ci])
            ch = arch.hbm_channel_of(step.tile.x, step.tile.y)
            grant = max(d0 + dma_setup, hbm_free[ch])
            burst = p.size / ch_bw
            hbm_free[ch] = grant + burst
            end = grant + burst + latency
            chans[ci] = end
            intervals["hbm_access"].append((d0, end))
            if kind is StepKind.HBM_LOAD:
                bytes_read += p.size
            else:
                bytes_written += p.size
        elif kind in (StepKind.MULTICAST, StepKind.REDUCE):
            if isinstance(p, UnicastPayload):
                path = route_xy(p.src_tile, p.dst_tile)
                end = links.reserve_path(path, t, p.size)
                if end > t:
                    intervals["inter_tile_comm"].append((t, end))
            else:
                extent = len(p.members)
                if extent <= 1:
                    end = t
                else:
                    req = CollectiveRequest(
                        kind=p.kind,
                        axis=p.axis,
                        strategy=p.strategy,
                        root=p.root,
                        size=p.size,
                        group_extent=extent,
                    )
                    duration = collective_time(req, noc_spec, tile)
                    first = p.members[0]
                    origin = first.x if p.axis is Axis.ROW else first.y
                    key = (
                        p.root,
                        p.axis,
                        origin,
                        extent,
                        p.kind is not CollectiveKind.MULTICAST,
                    )
                    span = span_cache.get(key)
                    if span is None:
                        span = span_links(
                            p.root, p.axis, extent, origin, key[-1]
                        )
                        span_cache[key] = span
                    end = links.reserve_span(span, t, duration)
                    if duration > 0:
                        intervals["inter_tile_comm"].append((end - duration, end))
        elif kind is StepKind.BARRIER:
            end = t + noc_spec.sync_barrier_cost
            intervals["sync_overhead"].append((t, end))
        else:
            raise SimError(f"unknown step kind {kind}")

        if functional:
            try:
                _exec_step(step, buffers, dram)
            except KeyError as e:
                raise SimError(
                    f"step {step.id} ({kind.value}) touched an unwritten "
                    f"buffer: {e}"
                ) from e

        completions[sid] = end
        processed += 1
        for nxt in dependents[sid]:
            r = ready_at[nxt]
            if end > r:
                ready_at[nxt] = r = end
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, (r, nxt))

    if processed != n:
        stuck = [s.id for s in steps if indeg[s.id] > 0][:10]
        raise SimError(f"deadlock: {n - processed} steps never ran, e.g. {stuck}")

    total = max(completions) if completions else 0.0
    exposed = _attribute(intervals, total)

    peak = tile.matrix_peak_flop_per_cycle
    span_sum = sum(mm_last[tc] - mm_first[tc] for tc in mm_first)
    util_active = flops / (span_sum * peak) if span_sum > 0 else 0.0
    denom_overall = total * arch.n_tiles * peak
    util_overall = flops / denom_overall if denom_overall > 0 else 0.0
    hbm_denom = total * hbm.bytes_per_cycle
    bw_util = (bytes_read + bytes_written) / hbm_denom if hbm_denom > 0 else 0.0

    engine_busy = {
        tc: {
            "matrix": busy_mat.get(tc, 0.0),
            "vector": busy_vec.get(tc, 0.0),
        }
        for tc in sorted(set(busy_mat) | set(busy_vec))
    }

    outputs = None
    if functional:
        outputs = {name: dram[name] for name in schedule.outputs if name in dram}

    return SimReport(
        total_cycles=total,
        exposed=exposed,
        engine_busy=engine_busy,
        hbm_bytes_read=bytes_read,
        hbm_bytes_written=bytes_written,
        matrix_utilization=util_active,
        matrix_utilization_overall=util_overall,
        avg_hbm_bw_utilization=bw_util,
        matmul_flops=flops,
        outputs=outputs,
    )
