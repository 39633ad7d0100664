"""Schedule generators for fused attention and distributed GEMM.

Two attention families are generated:

* Flash-style: each (instance, query-row-block) job runs start-to-finish on a
  single tile; queries stream over the KV sequence, re-reading K/V from HBM
  for every row block.  ``FA3`` interleaves two jobs per tile (separate
  buffer sets) so one job's softmax/DMA hides the other's matmuls.
* Flat-style: a G_x x G_y tile group computes one score block cooperatively.
  Diagonal fetcher tiles load Q/K/V slices and multicast them row-/
  column-wise; per-iteration row reductions merge the online-softmax stats;
  an exit-time row reduction assembles the output.  ``async`` mode runs two
  instances in counterphase on doubled buffers.

Both emit plain :class:`~.sim.Schedule` objects.  Dependencies are derived
automatically from buffer reads/writes (RAW, WAR, WAW), so generators only
state true data placement; overlap emerges from the simulator's resources.

Closed-form HBM I/O models for both families support exact conservation
checks against simulated byte counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .arch import ArchConfig
from .engines import GemmJob, VectorJob, VectorKind, gemm_cycles
from .noc import Axis, CollectiveKind, Strategy, TileCoord
from .numerics import AttentionWorkload, Variant, absorb_mla_weights
from .sim import (
    CollectivePayload,
    HbmXferPayload,
    MatMulPayload,
    Schedule,
    Step,
    StepKind,
    UnicastPayload,
    VectorPayload,
    _payload_reads,
    _payload_writes,
)

_STAT_BYTES = 4  # softmax stats (row max / denominator) are kept in FP32


# --- closed-form I/O models -------------------------------------------------


@dataclass(frozen=True, slots=True)
class IoModel:
    """Total HBM traffic (reads + writes) of one attention pass."""

    elements_total: int
    bytes_total: int

    def __post_init__(self) -> None:
        if self.elements_total < 0 or self.bytes_total < 0:
            raise ValueError("I/O totals must be non-negative")


def io_flash(B: int, H: int, D: int, S: int, M: int, dtype_bytes: int = 2) -> IoModel:
    """Flash-style traffic: Q and O touched once, K/V re-read per row block.

    Evaluates 2*B*H*D*S*(1 + S/M) in elements; S is padded to a multiple of
    the row-block size M.
    """
    s_pad = M * math.ceil(S / M)
    base = 2 * B * H * D * s_pad
    elements = base * (1 + s_pad // M)
    return IoModel(elements, elements * dtype_bytes)


def io_flat(
    B: int, H: int, D: int, S: int, M: int, N: int, dtype_bytes: int = 2
) -> IoModel:
    """Flat-style traffic with N cooperating row slices of size M: K/V are
    re-read once per group-row pass instead of once per row block.

    Evaluates 2*B*H*D*S*(1 + S/(N*M)); N*M is clamped to the sequence.
    """
    s_pad = M * math.ceil(S / M)
    group_rows = min(N * M, s_pad)
    base = 2 * B * H * D * s_pad
    elements = base * (1 + math.ceil(s_pad / group_rows))
    return IoModel(elements, elements * dtype_bytes)


# --- parameters -------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class FlatParams:
    """Group geometry for flat attention.

    ``B_r``/``B_c`` are the group-level score block sizes; each tile holds a
    ``slice_r x slice_c`` slice (B_r = G_y*slice_r, B_c = G_x*slice_c).
    """

    G_x: int
    G_y: int
    B_r: int
    B_c: int
    slice_r: int
    slice_c: int
    strategy: Strategy = Strategy.HW
    async_: bool = False

    def __post_init__(self) -> None:
        if min(self.G_x, self.G_y, self.slice_r, self.slice_c) < 1:
            raise ValueError("group and slice dimensions must be >= 1")
        if self.B_r != self.G_y * self.slice_r:
            raise ValueError("B_r must equal G_y * slice_r")
        if self.B_c != self.G_x * self.slice_c:
            raise ValueError("B_c must equal G_x * slice_c")

    @classmethod
    def make(
        cls,
        G_x: int,
        G_y: int,
        slice_r: int,
        slice_c: int,
        strategy: Strategy = Strategy.HW,
        async_: bool = False,
    ) -> FlatParams:
        return cls(
            G_x, G_y, G_y * slice_r, G_x * slice_c, slice_r, slice_c, strategy, async_
        )


# --- workload tensors -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class InstanceSpec:
    """One independent score problem (a set of query rows sharing one KV)."""

    index: int
    b: int
    kv_index: int
    q: str
    k: str
    v: str
    o: str
    rows: int
    d_qk: int
    d_v: int
    kv_rows: int
    v_is_k_slice: bool = False


@dataclass(slots=True)
class WorkloadTensors:
    """Per-instance DRAM tensor names, optional values, and oracle inputs."""

    instances: list[InstanceSpec]
    dram: dict[str, np.ndarray] | None
    outputs: tuple[str, ...]
    reference_inputs: dict[str, np.ndarray] | None = None


def make_workload_tensors(
    workload: AttentionWorkload, *, materialize: bool = False, seed: int = 0
) -> WorkloadTensors:
    """Lay out DRAM tensors as one 2D (rows x feature) matrix per instance.

    For MLA the query is pre-absorbed (c_q folded through W_uq @ W_uk^T plus
    the decoupled RoPE part) and V aliases the leading d_c columns of the
    latent K cache; the schedule output is the latent O, to be mapped through
    W_uv by the caller.
    """
    wl = workload
    rng = np.random.default_rng(seed) if materialize else None
    instances: list[InstanceSpec] = []
    dram: dict[str, np.ndarray] = {}
    reference: dict[str, np.ndarray] = {}

    def rand(*shape: int) -> np.ndarray:
        return 0.5 * rng.standard_normal(shape)

    if wl.variant is Variant.MLA_DECODE_ABSORBED:
        d_score = wl.d_c + wl.d_rope
        if materialize:
            reference["c_q"] = rand(wl.B, wl.S_q, wl.q_rank)
            reference["c_kv"] = rand(wl.B, wl.S_kv, wl.d_c)
            reference["W_uq"] = rand(wl.H, wl.q_rank, wl.D)
            reference["W_uk"] = rand(wl.H, wl.d_c, wl.D)
            reference["W_uv"] = rand(wl.H, wl.d_c, wl.dv)
            if wl.d_rope:
                reference["k_rope"] = rand(wl.B, wl.S_kv, wl.d_rope)
                reference["W_qr"] = rand(wl.H, wl.q_rank, wl.d_rope)
        for b in range(wl.B):
            j = b
            inst = InstanceSpec(
                index=j,
                b=b,
                kv_index=0,
                q=f"Q{j}",
                k=f"K{j}",
                v=f"K{j}",
                o=f"O{j}",
                rows=wl.s_q_eff,
                d_qk=d_score,
                d_v=wl.d_c,
                kv_rows=wl.S_kv,
                v_is_k_slice=True,
            )
            instances.append(inst)
            if materialize:
                q_eff = np.zeros((wl.s_q_eff, d_score))
                for h in range(wl.H):
                    rows = slice(h * wl.S_q, (h + 1) * wl.S_q)
                    absorbed = absorb_mla_weights(
                        reference["W_uq"][h], reference["W_uk"][h]
                    )
                    q_eff[rows, : wl.d_c] = reference["c_q"][b] @ absorbed
                    if wl.d_rope:
                        q_eff[rows, wl.d_c :] = (
                            reference["c_q"][b] @ reference["W_qr"][h]
                        )
                k_eff = reference["c_kv"][b]
                if wl.d_rope:
                    k_eff = np.concatenate([k_eff, reference["k_rope"][b]], axis=1)
                dram[inst.q] = q_eff
                dram[inst.k] = np.ascontiguousarray(k_eff)
                dram[inst.o] = np.zeros((wl.s_q_eff, wl.d_c))
    else:
        gqa = wl.variant is Variant.GQA_DECODE
        kv_heads = wl.H // wl.G if gqa else wl.H
        if materialize:
            reference["Q"] = rand(wl.B, wl.H, wl.S_q, wl.D)
            reference["K"] = rand(wl.B, kv_heads, wl.S_kv, wl.D)
            reference["V"] = rand(wl.B, kv_heads, wl.S_kv, wl.dv)
        for b in range(wl.B):
            for kv in range(kv_heads):
                j = b * kv_heads + kv
                inst = InstanceSpec(
                    index=j,
                    b=b,
                    kv_index=kv,
                    q=f"Q{j}",
                    k=f"K{j}",
                    v=f"V{j}",
                    o=f"O{j}",
                    rows=wl.s_q_eff,
                    d_qk=wl.D,
                    d_v=wl.dv,
                    kv_rows=wl.S_kv,
                )
                instances.append(inst)
                if materialize:
                    if gqa:
                        heads = range(kv * wl.G, (kv + 1) * wl.G)
                        q2d = np.concatenate(
                            [reference["Q"][b, h] for h in heads], axis=0
                        )
                    else:
                        q2d = reference["Q"][b, kv].copy()
                    dram[inst.q] = q2d
                    dram[inst.k] = reference["K"][b, kv].copy()
                    dram[inst.v] = reference["V"][b, kv].copy()
                    dram[inst.o] = np.zeros((inst.rows, inst.d_v))

    return WorkloadTensors(
        instances=instances,
        dram=dram if materialize else None,
        outputs=tuple(i.o for i in instances),
        reference_inputs=reference if materialize else None,
    )


def assemble_outputs(
    workload: AttentionWorkload,
    tensors: WorkloadTensors,
    outputs: dict[str, np.ndarray],
) -> np.ndarray:
    """Map per-instance schedule outputs back to (B, H, S_q, d_v).

    MLA outputs are latent (d_c wide) and pass through each head's value
    up-projection from the reference inputs.
    """
    wl = workload
    out = np.zeros((wl.B, wl.H, wl.S_q, wl.dv))
    if wl.variant is Variant.MLA_DECODE_ABSORBED:
        w_uv = tensors.reference_inputs["W_uv"]
        for inst in tensors.instances:
            latent = outputs[inst.o]
            for h in range(wl.H):
                rows = latent[h * wl.S_q : (h + 1) * wl.S_q]
                out[inst.b, h] = rows @ w_uv[h]
    elif wl.variant is Variant.GQA_DECODE:
        for inst in tensors.instances:
            o2d = outputs[inst.o]
            for i in range(wl.G):
                h = inst.kv_index * wl.G + i
                out[inst.b, h] = o2d[i * wl.S_q : (i + 1) * wl.S_q]
    else:
        for inst in tensors.instances:
            out[inst.b, inst.kv_index] = outputs[inst.o]
    return out


# --- schedule builder -------------------------------------------------------


class ScheduleBuilder:
    """Accumulates steps, deriving RAW/WAR/WAW dependencies from the buffer
    reads/writes each payload declares."""

    __slots__ = ("steps", "_last_write", "_readers")

    def __init__(self) -> None:
        self.steps: list[Step] = []
        self._last_write: dict[tuple[TileCoord, str], int] = {}
        self._readers: dict[tuple[TileCoord, str], list[int]] = {}

    def add(
        self,
        tile: TileCoord,
        kind: StepKind,
        payload,
        deps: Iterable[int] = (),
    ) -> int:
        sid = len(self.steps)
        step = Step(sid, tile, kind, payload, ())
        dep_set = set(deps)
        reads = list(_payload_reads(step))
        writes = list(_payload_writes(step))
        last = self._last_write
        readers = self._readers
        for key in reads:
            w = last.get(key)
            if w is not None:
                dep_set.add(w)
        for t, b, _ in writes:
            key = (t, b)
            w = last.get(key)
            if w is not None:
                dep_set.add(w)
            dep_set.update(readers.get(key, ()))
        for key in reads:
            readers.setdefault(key, []).append(sid)
        for t, b, _ in writes:
            key = (t, b)
            last[key] = sid
            readers[key] = []
        step.deps = tuple(sorted(dep_set))
        self.steps.append(step)
        return sid

    def build(
        self,
        group_shape: tuple[int, int],
        metadata: dict,
        tensors: WorkloadTensors | None = None,
    ) -> Schedule:
        return Schedule(
            steps=self.steps,
            group_shape=group_shape,
            metadata=metadata,
            dram=tensors.dram if tensors else None,
            outputs=tensors.outputs if tensors else (),
        )


# --- masking helpers --------------------------------------------------------

_SKIP = "skip"


def _block_mask(wl: AttentionWorkload, r0: int, rows: int, c0: int, cols: int):
    """Visibility of score block [r0:r0+rows) x [c0:c0+cols): None when fully
    visible, ``"skip"`` when fully masked, else a boolean array."""
    if not wl.causal:
        return None
    tokens = np.array([wl.row_token(r0 + i) for i in range(rows)])
    bounds = wl.S_kv - wl.S_q + tokens
    if c0 + cols - 1 <= bounds.min():
        return None
    if c0 > bounds.max():
        return _SKIP
    return np.arange(c0, c0 + cols)[None, :] <= bounds[:, None]


def _visible_iters(wl: AttentionWorkload, r0: int, rows: int, B_c: int, t_all: int) -> int:
    if not wl.causal:
        return t_all
    bound = max(wl.causal_bound(wl.row_token(r0 + i)) for i in range(rows))
    if bound < 0:
        return 0
    return min(t_all, bound // B_c + 1)


# --- shared emission helpers ------------------------------------------------


def _vec(
    op: str,
    kind: VectorKind,
    elements: int,
    dtype_bytes: int,
    inputs: tuple[str, ...] = (),
    output: str | None = None,
    out_shape: tuple[int, ...] | None = None,
    out_bytes: int = 0,
    fill: float = 0.0,
    mask: np.ndarray | None = None,
) -> VectorPayload:
    return VectorPayload(
        job=VectorJob(kind, elements, dtype_bytes),
        op=op,
        inputs=inputs,
        output=output,
        out_shape=out_shape,
        out_bytes=out_bytes,
        fill=fill,
        mask=mask,
    )


def _softmax_ops(
    bld: ScheduleBuilder,
    tile: TileCoord,
    *,
    s_buf: str,
    mb: str,
    rows: int,
    cols: int,
    dt: int,
    mask: np.ndarray | None,
) -> None:
    """Per-tile score post-processing: optional mask, rowmax, exp, rowsum."""
    if mask is not None:
        bld.add(
            tile,
            StepKind.VECTOR_OP,
            _vec(
                "mask_scores",
                VectorKind.ADD,
                rows * cols,
                dt,
                inputs=(s_buf,),
                output=s_buf,
                out_bytes=rows * cols * dt,
                mask=mask,
            ),
        )
    bld.add(
        tile,
        StepKind.VECTOR_OP,
        _vec(
            "rowmax",
            VectorKind.ROWMAX,
            rows * cols,
            dt,
            inputs=(s_buf,),
            output=mb,
            out_shape=(rows,),
            out_bytes=rows * _STAT_BYTES,
        ),
    )


def _exp_and_rowsum(
    bld: ScheduleBuilder,
    tile: TileCoord,
    *,
    s_buf: str,
    m_new: str,
    lb: str,
    rows: int,
    cols: int,
    dt: int,
) -> None:
    bld.add(
        tile,
        StepKind.VECTOR_OP,
        _vec(
            "exp_sub",
            VectorKind.EXP,
            rows * cols,
            dt,
            inputs=(s_buf, m_new),
            output=s_buf,
            out_bytes=rows * cols * dt,
        ),
    )
    bld.add(
        tile,
        StepKind.VECTOR_OP,
        _vec(
            "rowsum",
            VectorKind.ROWSUM,
            rows * cols,
            dt,
            inputs=(s_buf,),
            output=lb,
            out_shape=(rows,),
            out_bytes=rows * _STAT_BYTES,
        ),
    )


# --- flash-style generator --------------------------------------------------


def gen_flashattention(
    workload: AttentionWorkload,
    arch: ArchConfig,
    variant: str = "FA2",
    M: int = 128,
    *,
    tensors: WorkloadTensors | None = None,
) -> Schedule:
    """Per-tile fused attention; jobs = (instance, query-row-block).

    FA2 maps jobs round-robin over tiles, one at a time per tile.  FA3 gives
    each tile two jobs on independent buffer sets so softmax and DMA of one
    hide the matmuls of the other.  Decode variants span a single row block.
    """
    if variant not in ("FA2", "FA3"):
        raise ValueError(f"unknown flash variant '{variant}'")
    if M < 1:
        raise ValueError("M must be >= 1")
    wl = workload
    if tensors is None:
        tensors = make_workload_tensors(wl)
    dt = wl.dtype_bytes
    mesh_x, mesh_y = arch.noc.mesh_x, arch.noc.mesh_y
    n_tiles = mesh_x * mesh_y
    prefill = wl.variant is Variant.MHA_PREFILL
    bld = ScheduleBuilder()

    jobs: list[tuple[InstanceSpec, int, int]] = []  # (instance, row0, rows)
    for inst in tensors.instances:
        b_r = M if prefill else inst.rows
        for r0 in range(0, inst.rows, b_r):
            jobs.append((inst, r0, min(b_r, inst.rows - r0)))

    for j, (inst, r0, rows) in enumerate(jobs):
        if variant == "FA3":
            t_idx, slot = (j // 2) % n_tiles, j % 2
        else:
            t_idx, slot = j % n_tiles, 0
        tile = TileCoord(t_idx % mesh_x, t_idx // mesh_x)
        sfx = f".{slot}"
        q, k, v, s, o = (name + sfx for name in ("Q", "K", "V", "S", "O"))
        m0, m1, l, mb, lb = (name + sfx for name in ("m0", "m1", "l", "mb", "lb"))

        bld.add(
            tile,
            StepKind.HBM_LOAD,
            HbmXferPayload(
                buffer=q,
                size=rows * inst.d_qk * dt,
                shape=(rows, inst.d_qk),
                dram=inst.q,
                rows=(r0, r0 + rows),
                cols=(0, inst.d_qk),
                scale=wl.score_scale,
            ),
        )
        bld.add(
            tile,
            StepKind.VECTOR_OP,
            _vec("init", VectorKind.ADD, 0, dt, output=m0,
                 out_shape=(rows,), out_bytes=rows * _STAT_BYTES, fill=-np.inf),
        )
        bld.add(
            tile,
            StepKind.VECTOR_OP,
            _vec("init", VectorKind.ADD, 0, dt, output=l,
                 out_shape=(rows,), out_bytes=rows * _STAT_BYTES, fill=0.0),
        )

        t_all = math.ceil(inst.kv_rows / M)
        t_cnt = _visible_iters(wl, r0, rows, M, t_all)
        wrote_o = False
        for t in range(t_cnt):
            c0 = t * M
            cols = min(M, inst.kv_rows - c0)
            mask = _block_mask(wl, r0, rows, c0, cols)
            if mask is _SKIP:
                continue
            m_old, m_new = (m0, m1) if t % 2 == 0 else (m1, m0)
            bld.add(
                tile,
                StepKind.HBM_LOAD,
                HbmXferPayload(
                    buffer=k,
                    size=cols * inst.d_qk * dt,
                    shape=(cols, inst.d_qk),
                    dram=inst.k,
                    rows=(c0, c0 + cols),
                    cols=(0, inst.d_qk),
                ),
            )
            if not inst.v_is_k_slice:
                bld.add(
                    tile,
                    StepKind.HBM_LOAD,
                    HbmXferPayload(
                        buffer=v,
                        size=cols * inst.d_v * dt,
                        shape=(cols, inst.d_v),
                        dram=inst.v,
                        rows=(c0, c0 + cols),
                        cols=(0, inst.d_v),
                    ),
                )
            bld.add(
                tile,
                StepKind.MATMUL,
                MatMulPayload(
                    job=GemmJob(rows, cols, inst.d_qk, dt),
                    a=q,
                    b=k,
                    out=s,
                    transpose_b=True,
                ),
            )
            _softmax_ops(
                bld, tile, s_buf=s, mb=mb,
                rows=rows, cols=cols, dt=dt, mask=mask,
            )
            bld.add(
                tile,
                StepKind.VECTOR_OP,
                _vec("ewise_max", VectorKind.ROWMAX, rows, dt,
                     inputs=(m_old, mb), output=m_new,
                     out_shape=(rows,), out_bytes=rows * _STAT_BYTES),
            )
            _exp_and_rowsum(
                bld, tile, s_buf=s, m_new=m_new, lb=lb, rows=rows, cols=cols, dt=dt
            )
            bld.add(
                tile,
                StepKind.VECTOR_OP,
                _vec("denom_update", VectorKind.SCALE_ACCUMULATE, rows, dt,
                     inputs=(l, m_old, m_new, lb), output=l,
                     out_shape=(rows,), out_bytes=rows * _STAT_BYTES),
            )
            if wrote_o:
                bld.add(
                    tile,
                    StepKind.VECTOR_OP,
                    _vec("rescale", VectorKind.SCALE_ACCUMULATE, rows * inst.d_v, dt,
                         inputs=(o, m_old, m_new), output=o,
                         out_bytes=rows * inst.d_v * dt),
                )
            bld.add(
                tile,
                StepKind.MATMUL,
                MatMulPayload(
                    job=GemmJob(rows, inst.d_v, cols, dt),
                    a=s,
                    b=k if inst.v_is_k_slice else v,
                    out=o,
                    accumulate=wrote_o,
                    b_col_range=(0, inst.d_v) if inst.v_is_k_slice else None,
                ),
            )
            wrote_o = True
        if not wrote_o:
            bld.add(
                tile,
                StepKind.VECTOR_OP,
                _vec("init", VectorKind.ADD, 0, dt, output=o,
                     out_shape=(rows, inst.d_v), out_bytes=rows * inst.d_v * dt),
            )
        bld.add(
            tile,
            StepKind.VECTOR_OP,
            _vec("normalize", VectorKind.SCALE_ACCUMULATE, rows * inst.d_v, dt,
                 inputs=(o, l), output=o, out_bytes=rows * inst.d_v * dt),
        )
        bld.add(
            tile,
            StepKind.HBM_STORE,
            HbmXferPayload(
                buffer=o,
                size=rows * inst.d_v * dt,
                shape=(rows, inst.d_v),
                dram=inst.o,
                rows=(r0, r0 + rows),
                cols=(0, inst.d_v),
            ),
        )

    meta = {
        "dataflow": variant,
        "M": M,
        "workload": wl.variant.value,
        "jobs": len(jobs),
    }
    return bld.build((1, 1), meta, tensors)


# --- flat-style generator ---------------------------------------------------


def gen_flatattention(
    workload: AttentionWorkload,
    arch: ArchConfig,
    params: FlatParams,
    *,
    tensors: WorkloadTensors | None = None,
) -> Schedule:
    """Cooperative group attention: score blocks are tiled over a G_x x G_y
    group, stats merge through row collectives, O assembles through an
    exit-time row reduction.

    Instances round-robin over all group placements on the mesh.  In async
    mode two buffer slots per group run alternating instances in
    counterphase; otherwise instances execute strictly one at a time per
    group (each instance's first loads wait on the previous store).
    """
    wl = workload
    p = params
    mesh_x, mesh_y = arch.noc.mesh_x, arch.noc.mesh_y
    if p.G_x > mesh_x or p.G_y > mesh_y:
        raise ValueError(
            f"group {p.G_x}x{p.G_y} exceeds mesh {mesh_x}x{mesh_y}"
        )
    if tensors is None:
        tensors = make_workload_tensors(wl)
    dt = wl.dtype_bytes
    sr, sc = p.slice_r, p.slice_c
    n_gx, n_gy = mesh_x // p.G_x, mesh_y // p.G_y
    n_groups = n_gx * n_gy
    slots = 2 if p.async_ else 1
    strat = p.strategy
    bld = ScheduleBuilder()
    # Store steps of the previous instance per (group, slot): sync-mode gate.
    prev_stores: dict[tuple[int, int], list[int]] = {}

    for inst in tensors.instances:
        j = inst.index
        g = j % n_groups
        slot = (j // n_groups) % slots
        ox, oy = (g % n_gx) * p.G_x, (g // n_gx) * p.G_y
        sfx = f".{slot}"
        gate: Sequence[int] = prev_stores.get((g, slot), ()) if not p.async_ else ()
        stores: list[int] = []

        q, k_b, v_b, s = (name + sfx for name in ("Q", "K", "V", "S"))
        o, m0, m1, l = (name + sfx for name in ("O", "m0", "m1", "l"))
        mb, lb, mx, mrow, lrow, lg = (
            name + sfx for name in ("mb", "lb", "mx", "mrow", "lrow", "lg")
        )
        v_src = k_b if inst.v_is_k_slice else v_b

        def tile_at(x: int, y: int) -> TileCoord:
            return TileCoord(ox + x, oy + y)

        def row_members(y: int) -> tuple[TileCoord, ...]:
            return tuple(tile_at(i, y) for i in range(p.G_x))

        def col_members(x: int) -> tuple[TileCoord, ...]:
            return tuple(tile_at(x, jj) for jj in range(p.G_y))

        B_r, B_c = p.B_r, p.B_c
        passes = math.ceil(inst.rows / B_r)
        t_all = math.ceil(inst.kv_rows / B_c)

        for pp in range(passes):
            pass_r0 = pp * B_r
            row_info = []  # (y, r0, rows)
            for y in range(p.G_y):
                r0 = pass_r0 + y * sr
                if r0 >= inst.rows:
                    break
                row_info.append((y, r0, min(sr, inst.rows - r0)))

            # Q slices: the row fetcher loads directly into the multicast
            # target buffer, then replicates it across the row.
            for y, r0, rows in row_info:
                root = tile_at(y % p.G_x, y)
                bld.add(
                    root,
                    StepKind.HBM_LOAD,
                    HbmXferPayload(
                        buffer=q,
                        size=rows * inst.d_qk * dt,
                        shape=(rows, inst.d_qk),
                        dram=inst.q,
                        rows=(r0, r0 + rows),
                        cols=(0, inst.d_qk),
                        scale=wl.score_scale,
                    ),
                    deps=gate,
                )
                if p.G_x > 1:
                    bld.add(
                        root,
                        StepKind.MULTICAST,
                        CollectivePayload(
                            kind=CollectiveKind.MULTICAST,
                            axis=Axis.ROW,
                            strategy=strat,
                            root=root,
                            members=row_members(y),
                            size=rows * inst.d_qk * dt,
                            src=q,
                            dst=q,
                        ),
                    )
                for x in range(p.G_x):
                    tl = tile_at(x, y)
                    bld.add(
                        tl,
                        StepKind.VECTOR_OP,
                        _vec("init", VectorKind.ADD, 0, dt, output=m0,
                             out_shape=(rows,), out_bytes=rows * _STAT_BYTES,
                             fill=-np.inf),
                        deps=gate,
                    )
                    if tl == root:
                        bld.add(
                            tl,
                            StepKind.VECTOR_OP,
                            _vec("init", VectorKind.ADD, 0, dt, output=l,
                                 out_shape=(rows,), out_bytes=rows * _STAT_BYTES),
                            deps=gate,
                        )

            max_r0 = row_info[-1][1]
            max_rows = row_info[-1][2]
            t_cnt = _visible_iters(wl, max_r0, max_rows, B_c, t_all)
            wrote_o: dict[TileCoord, bool] = {}

            for t in range(t_cnt):
                m_old, m_new = (m0, m1) if t % 2 == 0 else (m1, m0)
                iter_c0 = t * B_c
                col_info = []  # (x, c0, cols)
                for x in range(p.G_x):
                    c0 = iter_c0 + x * sc
                    if c0 >= inst.kv_rows:
                        break
                    col_info.append((x, c0, min(sc, inst.kv_rows - c0)))
                cols_at = {x: (c0, cols) for x, c0, cols in col_info}

                # K/V slices: column fetcher load + column multicast.
                for x, c0, cols in col_info:
                    root = tile_at(x, x % p.G_y)
                    kv_bufs = [(k_b, inst.k, inst.d_qk)]
                    if not inst.v_is_k_slice:
                        kv_bufs.append((v_b, inst.v, inst.d_v))
                    for buf, dram_name, width in kv_bufs:
                        bld.add(
                            root,
                            StepKind.HBM_LOAD,
                            HbmXferPayload(
                                buffer=buf,
                                size=cols * width * dt,
                                shape=(cols, width),
                                dram=dram_name,
                                rows=(c0, c0 + cols),
                                cols=(0, width),
                            ),
                            deps=gate if (pp == 0 and t == 0) else (),
                        )
                        if p.G_y > 1:
                            bld.add(
                                root,
                                StepKind.MULTICAST,
                                CollectivePayload(
                                    kind=CollectiveKind.MULTICAST,
                                    axis=Axis.COLUMN,
                                    strategy=strat,
                                    root=root,
                                    members=col_members(x),
                                    size=cols * width * dt,
                                    src=buf,
                                    dst=buf,
                                ),
                            )

                # Local scores + row max.
                active: dict[tuple[int, int], tuple[int, int, np.ndarray | None]] = {}
                for y, r0, rows in row_info:
                    for x in range(p.G_x):
                        tl = tile_at(x, y)
                        here = cols_at.get(x)
                        mask = (
                            _block_mask(wl, r0, rows, here[0], here[1])
                            if here
                            else _SKIP
                        )
                        if here is None or mask is _SKIP:
                            bld.add(
                                tl,
                                StepKind.VECTOR_OP,
                                _vec("init", VectorKind.ADD, 0, dt, output=mb,
                                     out_shape=(rows,),
                                     out_bytes=rows * _STAT_BYTES, fill=-np.inf),
                            )
                            continue
                        c0, cols = here
                        active[(x, y)] = (rows, cols, mask)
                        bld.add(
                            tl,
                            StepKind.MATMUL,
                            MatMulPayload(
                                job=GemmJob(rows, cols, inst.d_qk, dt),
                                a=q,
                                b=k_b,
                                out=s,
                                transpose_b=True,
                            ),
                        )
                        _softmax_ops(
                            bld, tl, s_buf=s, mb=mb,
                            rows=rows, cols=cols, dt=dt, mask=mask,
                        )

                # Merge row maxima, broadcast the running max.
                for y, r0, rows in row_info:
                    root = tile_at(y % p.G_x, y)
                    bld.add(
                        root,
                        StepKind.REDUCE,
                        CollectivePayload(
                            kind=CollectiveKind.REDUCE_MAX,
                            axis=Axis.ROW,
                            strategy=strat,
                            root=root,
                            members=row_members(y),
                            size=rows * _STAT_BYTES,
                            src=mb,
                            dst=mrow,
                        ),
                    )
                    bld.add(
                        root,
                        StepKind.VECTOR_OP,
                        _vec("ewise_max", VectorKind.ROWMAX, rows, dt,
                             inputs=(m_old, mrow), output=mx,
                             out_shape=(rows,), out_bytes=rows * _STAT_BYTES),
                    )
                    bld.add(
                        root,
                        StepKind.MULTICAST,
                        CollectivePayload(
                            kind=CollectiveKind.MULTICAST,
                            axis=Axis.ROW,
                            strategy=strat,
                            root=root,
                            members=row_members(y),
                            size=rows * _STAT_BYTES,
                            src=mx,
                            dst=m_new,
                        ),
                    )

                # Exponentiate, partial sums, merge denominators at the root.
                for y, r0, rows in row_info:
                    for x in range(p.G_x):
                        if (x, y) not in active:
                            bld.add(
                                tile_at(x, y),
                                StepKind.VECTOR_OP,
                                _vec("init", VectorKind.ADD, 0, dt, output=lb,
                                     out_shape=(rows,),
                                     out_bytes=rows * _STAT_BYTES),
                            )
                            continue
                        rows_, cols_, _ = active[(x, y)]
                        _exp_and_rowsum(
                            bld, tile_at(x, y), s_buf=s, m_new=m_new, lb=lb,
                            rows=rows_, cols=cols_, dt=dt,
                        )
                for y, r0, rows in row_info:
                    root = tile_at(y % p.G_x, y)
                    bld.add(
                        root,
                        StepKind.REDUCE,
                        CollectivePayload(
                            kind=CollectiveKind.REDUCE_SUM,
                            axis=Axis.ROW,
                            strategy=strat,
                            root=root,
                            members=row_members(y),
                            size=rows * _STAT_BYTES,
                            src=lb,
                            dst=lrow,
                        ),
                    )
                    bld.add(
                        root,
                        StepKind.VECTOR_OP,
                        _vec("denom_update", VectorKind.SCALE_ACCUMULATE, rows, dt,
                             inputs=(l, m_old, m_new, lrow), output=l,
                             out_shape=(rows,), out_bytes=rows * _STAT_BYTES),
                    )

                # Rescale stale partial outputs, then accumulate P @ V.
                for y, r0, rows in row_info:
                    for x in range(p.G_x):
                        tl = tile_at(x, y)
                        if wrote_o.get(tl):
                            bld.add(
                                tl,
                                StepKind.VECTOR_OP,
                                _vec("rescale", VectorKind.SCALE_ACCUMULATE,
                                     rows * inst.d_v, dt,
                                     inputs=(o, m_old, m_new), output=o,
                                     out_bytes=rows * inst.d_v * dt),
                            )
                        info = active.get((x, y))
                        if info is None:
                            continue
                        rows_, cols_, _ = info
                        bld.add(
                            tl,
                            StepKind.MATMUL,
                            MatMulPayload(
                                job=GemmJob(rows_, inst.d_v, cols_, dt),
                                a=s,
                                b=v_src,
                                out=o,
                                accumulate=bool(wrote_o.get(tl)),
                                b_col_range=(0, inst.d_v)
                                if inst.v_is_k_slice
                                else None,
                            ),
                        )
                        wrote_o[tl] = True

            # Exit: broadcast the denominator, normalize everywhere (the
            # division distributes over the row sum), reduce O into the
            # root's buffer in place, store.
            for y, r0, rows in row_info:
                root = tile_at(y % p.G_x, y)
                bld.add(
                    root,
                    StepKind.MULTICAST,
                    CollectivePayload(
                        kind=CollectiveKind.MULTICAST,
                        axis=Axis.ROW,
                        strategy=strat,
                        root=root,
                        members=row_members(y),
                        size=rows * _STAT_BYTES,
                        src=l,
                        dst=lg,
                    ),
                )
                for x in range(p.G_x):
                    tl = tile_at(x, y)
                    if not wrote_o.get(tl):
                        bld.add(
                            tl,
                            StepKind.VECTOR_OP,
                            _vec("init", VectorKind.ADD, 0, dt, output=o,
                                 out_shape=(rows, inst.d_v),
                                 out_bytes=rows * inst.d_v * dt),
                        )
                    bld.add(
                        tl,
                        StepKind.VECTOR_OP,
                        _vec("normalize", VectorKind.SCALE_ACCUMULATE,
                             rows * inst.d_v, dt,
                             inputs=(o, lg), output=o,
                             out_bytes=rows * inst.d_v * dt),
                    )
                bld.add(
                    root,
                    StepKind.REDUCE,
                    CollectivePayload(
                        kind=CollectiveKind.REDUCE_SUM,
                        axis=Axis.ROW,
                        strategy=strat,
                        root=root,
                        members=row_members(y),
                        size=rows * inst.d_v * dt,
                        src=o,
                        dst=o,
                    ),
                )
                stores.append(
                    bld.add(
                        root,
                        StepKind.HBM_STORE,
                        HbmXferPayload(
                            buffer=o,
                            size=rows * inst.d_v * dt,
                            shape=(rows, inst.d_v),
                            dram=inst.o,
                            rows=(r0, r0 + rows),
                            cols=(0, inst.d_v),
                        ),
                    )
                )

        prev_stores[(g, slot)] = stores

    meta = {
        "dataflow": "FlatAsync" if p.async_ else f"Flat[{strat.value}]",
        "G_x": p.G_x,
        "G_y": p.G_y,
        "slice_r": sr,
        "slice_c": sc,
        "strategy": strat.value,
        "async": p.async_,
        "workload": wl.variant.value,
        "instances": len(tensors.instances),
    }
    return bld.build((p.G_x, p.G_y), meta, tensors)


_DECODE_VARIANTS = (
    Variant.MHA_DECODE,
    Variant.MHA_SPEC_DECODE,
    Variant.GQA_DECODE,
    Variant.MLA_DECODE_ABSORBED,
)


def gen_flat_decode(
    workload: AttentionWorkload,
    arch: ArchConfig,
    params: FlatParams | None = None,
    *,
    tensors: WorkloadTensors | None = None,
) -> Schedule:
    """Decode-path flat attention: the variant's effective query rows (single
    row, speculative window, grouped heads, or all heads over latent KV) form
    one rectangular score problem per instance, then the prefill machinery
    applies unchanged."""
    if workload.variant not in _DECODE_VARIANTS:
        raise ValueError(f"not a decode variant: {workload.variant.value}")
    if params is None:
        from .tiling import params_for_workload

        params = params_for_workload(workload, arch, async_=True)
    return gen_flatattention(workload, arch, params, tensors=tensors)


# --- SUMMA ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SummaMapping:
    """Placement of a stationary-C GEMM on the mesh.

    ``p_m x p_n`` tile subgrids own C blocks; ``p_k`` subgrids stacked
    vertically split the contraction and combine partial C blocks pairwise at
    the end.  ``panel`` is the k-panel streamed per iteration; double
    buffering duplicates the panel buffers so fetch/multicast of iteration
    t+1 overlaps the matmul of iteration t.
    """

    p_m: int
    p_n: int
    p_k: int = 1
    panel: int = 128
    double_buffer: bool = True

    def __post_init__(self) -> None:
        if min(self.p_m, self.p_n, self.p_k, self.panel) < 1:
            raise ValueError("mapping parameters must be >= 1")
        if self.p_k & (self.p_k - 1):
            raise ValueError("p_k must be a power of two")


def _pow2_divisors(value: int, limit: int) -> list[int]:
    out = [1]
    d = 2
    while d <= limit and value % d == 0:
        out.append(d)
        d *= 2
    return out


def default_summa_mapping(m: int, n: int, k: int, arch: ArchConfig, block: int) -> SummaMapping:
    """Whole-mesh stationary-C mapping (no k-split)."""
    p_m = max(_pow2_divisors(m, arch.noc.mesh_y))
    p_n = max(_pow2_divisors(n, arch.noc.mesh_x))
    panel = math.gcd(k, max(1, block))
    return SummaMapping(p_m=p_m, p_n=p_n, p_k=1, panel=panel)


def select_summa_mapping(m: int, n: int, k: int, arch: ArchConfig) -> SummaMapping:
    """Grid-search the mapping space with a closed-form pipeline predictor.

    The steady-state iteration time is the max of the matmul (plus the issue
    gap) and the panel feed (HBM fetch + multicast); k-splitting adds
    pairwise combine rounds.  Ties break toward larger panels and fewer
    k-subgrids for lower overhead.
    """
    tile = arch.tile
    noc = arch.noc
    dt = arch.dtype_bytes
    gap = tile.matrix_issue_gap_cycles
    best: tuple | None = None
    for p_k in (1, 2, 4):
        if k % p_k:
            continue
        ks = k // p_k
        for p_m in _pow2_divisors(m, noc.mesh_y // p_k):
            bm = m // p_m
            for p_n in _pow2_divisors(n, noc.mesh_x):
                bn = n // p_n
                panels = [c for c in (32, 64, 128, 256, 512) if c <= ks and ks % c == 0]
                if not panels:
                    panels = [ks]
                for kp in panels:
                    c_bytes = bm * bn * dt
                    fp = (
                        2 * dt * (bm * kp + kp * bn)
                        + c_bytes * (2 if p_k > 1 else 1)
                    )
                    if fp > tile.l1_capacity:
                        continue
                    g = gemm_cycles(GemmJob(bm, bn, kp, dt), tile) + gap
                    feed_a = (
                        bm * kp * dt / arch.hbm.channel_bytes_per_cycle
                        + arch.hbm.access_latency
                        + bm * kp * dt / noc.link_bytes_per_cycle
                        + (p_n - 1) * noc.hop_latency
                    )
                    feed_b = (
                        kp * bn * dt / arch.hbm.channel_bytes_per_cycle
                        + arch.hbm.access_latency
                        + kp * bn * dt / noc.link_bytes_per_cycle
                        + (p_m - 1) * noc.hop_latency
                    )
                    iters = ks // kp
                    t = iters * max(g, feed_a, feed_b) + max(feed_a, feed_b)
                    half = 1
                    while half < p_k:
                        t += (
                            c_bytes / noc.link_bytes_per_cycle
                            + half * p_m * noc.hop_latency
                            + 3 * c_bytes / tile.l1_bandwidth
                        )
                        half *= 2
                    t += c_bytes / arch.hbm.channel_bytes_per_cycle
                    key = (t, p_k, -kp, -p_m, -p_n)
                    if best is None or key < best[0]:
                        best = (key, SummaMapping(p_m, p_n, p_k, kp))
    if best is None:
        raise ValueError(
            f"no SUMMA mapping fits L1 for {m}x{n}x{k} at {dt} B/elem"
        )
    return best[1]


def gen_summa(
    m: int,
    n: int,
    k: int,
    arch: ArchConfig,
    block: int,
    *,
    mapping: SummaMapping | None = None,
    materialize: bool = False,
    seed: int = 0,
    strategy: Strategy = Strategy.HW,
) -> Schedule:
    """Stationary-C distributed GEMM: per k-panel, diagonal fetchers load the
    A column-panel and B row-panel, multicast them row-/column-wise, and every
    tile accumulates its C block; k-subgrids combine pairwise, subgrid 0
    stores."""
    if mapping is None:
        mapping = default_summa_mapping(m, n, k, arch, block)
    mp = mapping
    if m % mp.p_m or n % mp.p_n or k % mp.p_k:
        raise ValueError(
            f"shape {m}x{n}x{k} not divisible by mapping "
            f"{mp.p_m}x{mp.p_n} (p_k={mp.p_k})"
        )
    ks = k // mp.p_k
    if ks % mp.panel:
        raise ValueError(f"panel {mp.panel} must divide {ks}")
    if mp.p_n > arch.noc.mesh_x or mp.p_m * mp.p_k > arch.noc.mesh_y:
        raise ValueError("mapping exceeds mesh")
    dt = arch.dtype_bytes
    bm, bn, kp = m // mp.p_m, n // mp.p_n, mp.panel
    iters = ks // kp
    parities = 2 if (mp.double_buffer and iters > 1) else 1
    bld = ScheduleBuilder()

    dram = None
    if materialize:
        rng = np.random.default_rng(seed)
        dram = {
            "A": 0.5 * rng.standard_normal((m, k)),
            "B": 0.5 * rng.standard_normal((k, n)),
            "C": np.zeros((m, n)),
        }

    for s in range(mp.p_k):
        y0 = s * mp.p_m
        k0 = s * ks
        for t in range(iters):
            par = t % parities
            a_buf, b_buf = f"A{par}", f"B{par}"
            c0 = k0 + t * kp
            for i in range(mp.p_m):
                y = y0 + i
                root = TileCoord(y % mp.p_n, y)
                bld.add(
                    root,
                    StepKind.HBM_LOAD,
                    HbmXferPayload(
                        buffer=a_buf,
                        size=bm * kp * dt,
                        shape=(bm, kp),
                        dram="A",
                        rows=(i * bm, (i + 1) * bm),
                        cols=(c0, c0 + kp),
                    ),
                )
                if mp.p_n > 1:
                    bld.add(
                        root,
                        StepKind.MULTICAST,
                        CollectivePayload(
                            kind=CollectiveKind.MULTICAST,
                            axis=Axis.ROW,
                            strategy=strategy,
                            root=root,
                            members=tuple(
                                TileCoord(x, y) for x in range(mp.p_n)
                            ),
                            size=bm * kp * dt,
                            src=a_buf,
                            dst=a_buf,
                        ),
                    )
            for x in range(mp.p_n):
                root = TileCoord(x, y0 + (x % mp.p_m))
                bld.add(
                    root,
                    StepKind.HBM_LOAD,
                    HbmXferPayload(
                        buffer=b_buf,
                        size=kp * bn * dt,
                        shape=(kp, bn),
                        dram="B",
                        rows=(c0, c0 + kp),
                        cols=(x * bn, (x + 1) * bn),
                    ),
                )
                if mp.p_m > 1:
                    bld.add(
                        root,
                        StepKind.MULTICAST,
                        CollectivePayload(
                            kind=CollectiveKind.MULTICAST,
                            axis=Axis.COLUMN,
                            strategy=strategy,
                            root=root,
                            members=tuple(
                                TileCoord(x, y0 + jj) for jj in range(mp.p_m)
                            ),
                            size=kp * bn * dt,
                            src=b_buf,
                            dst=b_buf,
                        ),
                    )
            for i in range(mp.p_m):
                for x in range(mp.p_n):
                    bld.add(
                        TileCoord(x, y0 + i),
                        StepKind.MATMUL,
                        MatMulPayload(
                            job=GemmJob(bm, bn, kp, dt),
                            a=a_buf,
                            b=b_buf,
                            out="C",
                            accumulate=t > 0,
                        ),
                    )

    # Pairwise combine of k-subgrid partials down to subgrid 0.
    half = 1
    while half < mp.p_k:
        for s in range(half, mp.p_k, 2 * half):
            for i in range(mp.p_m):
                for x in range(mp.p_n):
                    src_t = TileCoord(x, s * mp.p_m + i)
                    dst_t = TileCoord(x, (s - half) * mp.p_m + i)
                    bld.add(
                        src_t,
                        StepKind.MULTICAST,
                        UnicastPayload(
                            src_tile=src_t,
                            dst_tile=dst_t,
                            size=bm * bn * dt,
                            src="C",
                            dst="Ci",
                        ),
                    )
                    bld.add(
                        dst_t,
                        StepKind.VECTOR_OP,
                        _vec("add", VectorKind.ADD, bm * bn, dt,
                             inputs=("C", "Ci"), output="C",
                             out_bytes=bm * bn * dt),
                    )
        half *= 2

    for i in range(mp.p_m):
        for x in range(mp.p_n):
            bld.add(
                TileCoord(x, i),
                StepKind.HBM_STORE,
                HbmXferPayload(
                    buffer="C",
                    size=bm * bn * dt,
                    shape=(bm, bn),
                    dram="C",
                    rows=(i * bm, (i + 1) * bm),
                    cols=(x * bn, (x + 1) * bn),
                ),
            )

    meta = {
        "dataflow": "SUMMA",
        "m": m,
        "n": n,
        "k": k,
        "p_m": mp.p_m,
        "p_n": mp.p_n,
        "p_k": mp.p_k,
        "panel": kp,
    }
    sched = bld.build((mp.p_n, mp.p_m * mp.p_k), meta)
    sched.dram = dram
    sched.outputs = ("C",) if dram is not None else ()
    return sched


# --- named dataflow dispatch ------------------------------------------------

FLAT_VARIANTS = {
    "FlatSC": (Strategy.SW_SEQ, False),
    "FlatTC": (Strategy.SW_TREE, False),
    "FlatHC": (Strategy.HW, False),
    "FlatAsync": (Strategy.HW, True),
}
DATAFLOW_NAMES = ("FA2", "FA3", "FlatSC", "FlatTC", "FlatHC", "FlatAsync")


def build_schedule(
    workload: AttentionWorkload,
    arch: ArchConfig,
    dataflow: str,
    *,
    M: int = 128,
    params: FlatParams | None = None,
    tensors: WorkloadTensors | None = None,
) -> Schedule:
    """Build a named dataflow's schedule (autotiled flat params by default)."""
    if dataflow in ("FA2", "FA3"):
        return gen_flashattention(workload, arch, dataflow, M, tensors=tensors)
    if dataflow in FLAT_VARIANTS:
        strategy, async_ = FLAT_VARIANTS[dataflow]
        if params is None:
            from .tiling import params_for_workload

            params = params_for_workload(
                workload, arch, strategy=strategy, async_=async_
            )
        else:
            params = FlatParams.make(
                params.G_x, params.G_y, params.slice_r, params.slice_c,
                strategy, async_,
            )
        return gen_flatattention(workload, arch, params, tensors=tensors)
    raise ValueError(f"unknown dataflow '{dataflow}'")
